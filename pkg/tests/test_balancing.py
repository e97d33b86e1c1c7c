import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointmtl import tensor as T
from jointmtl.balancing import (
    AUTOL_MIN,
    BALANCER_NAMES,
    BalancerError,
    BalancerSpec,
    cagrad_combine,
    cagrad_objective,
    cagrad_solve,
    dwa_weights,
    enumerate_all,
    graddrop_combine,
    make_balancer,
    pcgrad_combine,
    pcgrad_project,
    project_simplex,
    uncert_loss,
)
from jointmtl.exceptions import ConfigError
from jointmtl.model import ModelConfig, forward, init_params
from jointmtl.tensor import Tensor
from jointmtl.training import AdamW, task_losses
from oracles import cagrad_grid, central_diff

TABLE_ROWS = {
    "naive", "dwa", "uncert", "autol", "graddrop", "pcgrad", "cagrad",
    "dwa+graddrop", "dwa+pcgrad", "dwa+cagrad",
    "uncert+graddrop", "uncert+pcgrad", "uncert+cagrad",
    "autol+graddrop", "autol+pcgrad", "autol+cagrad",
}


# -------------------------------------------------------------------- names
def test_sixteen_configurations():
    specs = enumerate_all()
    assert len(specs) == 16 and {s.name for s in specs} == TABLE_ROWS == set(BALANCER_NAMES)


def test_name_parsing():
    assert BalancerSpec.from_name("autol + cagrad").name == "autol+cagrad"
    assert BalancerSpec.from_name("pcgrad").weighting is None
    with pytest.raises(ConfigError, match="uncert\\+pcgrad"):
        BalancerSpec.from_name("naive+pcgrad")
    for bad in ("pcgrad+dwa", "dwa+pcgrad+cagrad", "", "gradnorm"):
        with pytest.raises(BalancerError):
            BalancerSpec.from_name(bad)


def test_hyperparameter_validation():
    with pytest.raises(BalancerError):
        BalancerSpec.from_name("cagrad", cagrad_c=-1)
    with pytest.raises(BalancerError):
        BalancerSpec.from_name("graddrop", graddrop_leak=1.5)


# ---------------------------------------------------------------------- dwa
def test_dwa_examples():
    np.testing.assert_array_equal(dwa_weights([], 1, 2), [1, 1])
    np.testing.assert_array_equal(dwa_weights([np.ones(2)], 2, 2), [1, 1])
    np.testing.assert_allclose(dwa_weights([np.array([3.0, 3.0]), np.array([2.0, 2.0])], 3, 2), [1, 1], atol=1e-15)
    w = dwa_weights([np.array([1.0, 1.0]), np.array([0.5, 1.0])], 3, 2, 2.0)
    e = np.exp([0.25, 0.5])
    np.testing.assert_allclose(w, 2 * e / e.sum(), atol=1e-15)
    # the commonly quoted rounding (0.87566, 1.12434) is off in the 5th decimal
    np.testing.assert_allclose(w, [0.875647, 1.124353], atol=5e-7)


def test_dwa_zero_prior_loss():
    w = dwa_weights([np.array([0.0, 1.0]), np.array([0.3, 1.0])], 3, 2)
    np.testing.assert_allclose(w, [1, 1], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_dwa_weights_sum_to_k(k, seed, temp):
    rng = np.random.default_rng(seed)
    hist = [rng.uniform(0, 5, size=k), rng.uniform(0, 5, size=k)]
    assert abs(dwa_weights(hist, 3, k, temp).sum() - k) <= 1e-12


def test_dwa_balancer_tracks_epoch_means():
    b = make_balancer("dwa", 2)
    b.end_epoch([1.0, 1.0])
    np.testing.assert_array_equal(b.loss_weights(), [1, 1])
    b.end_epoch([0.5, 1.0])
    np.testing.assert_allclose(b.loss_weights(), [0.875647, 1.124353], atol=5e-7)
    b.end_epoch([0.5, 1.0])
    assert len(b.history) == 2


# ------------------------------------------------------------------- uncert
def test_uncert_examples():
    losses = [Tensor(0.7), Tensor(1.9)]
    assert uncert_loss(losses, Tensor(np.zeros(2))).item() == pytest.approx(1.3)
    s = Tensor(np.zeros(1), requires_grad=True)
    (g,) = T.grad(uncert_loss([Tensor(1.0)], s), [s])
    assert g[0] == 0.0


def test_uncert_gradients_fd():
    rng = np.random.default_rng(0)
    s0, l0 = rng.normal(size=3), rng.uniform(0.1, 3, size=3)
    s, ls = Tensor(s0, requires_grad=True), [Tensor(v, requires_grad=True) for v in l0]
    grads = T.grad(uncert_loss(ls, s), [s] + ls)
    np.testing.assert_allclose(grads[0], 0.5 * (1 - np.exp(-s0) * l0), atol=1e-15)
    fd = central_diff(lambda x: uncert_loss([Tensor(v) for v in l0], Tensor(x)).item(), s0)
    np.testing.assert_allclose(grads[0], fd, rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose([g.item() for g in grads[1:]], 0.5 * np.exp(-s0), atol=1e-15)


def test_uncert_stationary_point_is_log_loss():
    losses = np.array([0.4, 2.5])
    s = np.zeros(2)
    opt = AdamW(2, lr=0.05, weight_decay=0.0)
    for _ in range(3000):
        st_ = Tensor(s, requires_grad=True)
        (g,) = T.grad(uncert_loss([Tensor(v) for v in losses], st_), [st_])
        opt.step(s, g)
    np.testing.assert_allclose(np.exp(s), losses, rtol=1e-4)


# -------------------------------------------------------------------- autol
def test_autol_orthogonal_gradients_leave_lambda():
    b = make_balancer("autol", 2)
    before = b.lambdas.copy()
    b.autol_update(np.array([1.0, 0.0]), [np.array([0.0, 2.0]), np.array([0.0, -3.0])], 0.1)
    np.testing.assert_array_equal(b.lambdas, before)


def test_autol_same_objective_increases_lambda():
    b = make_balancer("autol", 1)
    g = np.array([0.3, -1.2])
    meta = b.autol_update(g, [g], 0.1)
    assert meta[0] == pytest.approx(-0.1 * g @ g)
    assert b.lambdas[0] > 0.1


def test_autol_clamped():
    b = make_balancer(BalancerSpec.from_name("autol", autol_meta_lr=10.0), 2)
    b.autol_update(np.ones(3), [np.ones(3), -np.ones(3)], 1.0)
    assert b.lambdas.min() >= AUTOL_MIN and b.lambdas[1] == AUTOL_MIN and b.lambdas[0] > 0.1


def autol_lookahead_case(seed: int, eta: float = 1e-3):
    """Quadratic toy: analytic first-order meta-gradient vs lookahead differences."""
    rng = np.random.default_rng(seed)
    n, k = 4, 2
    mats = [(lambda m: m @ m.T + np.eye(n))(rng.normal(size=(n, n))) for _ in range(k + 1)]
    centers = [rng.normal(size=n) for _ in range(k + 1)]
    theta, lam = rng.normal(size=n), np.array([0.1, 0.1])

    def grad_k(i, th):
        return mats[i] @ (th - centers[i])

    def val(th):
        d = th - centers[k]
        return 0.5 * d @ mats[k] @ d

    def after_step(l):
        return val(theta - eta * sum(l[i] * grad_k(i, theta) for i in range(k)))

    b = make_balancer("autol", k)
    meta = b.autol_update(grad_k(k, theta), [grad_k(i, theta) for i in range(k)], eta)
    fd = central_diff(after_step, lam, h=1e-4)
    return meta, fd


def test_autol_meta_gradient_matches_lookahead():
    meta, fd = autol_lookahead_case(0)
    assert np.max(np.abs(meta - fd) / np.abs(fd)) < 1e-2


# ------------------------------------------------------------------- pcgrad
def test_pcgrad_examples():
    rng = np.random.default_rng(0)
    np.testing.assert_allclose(pcgrad_combine([np.array([1.0, 0]), np.array([0, 1.0])], rng), [1, 1])
    np.testing.assert_allclose(pcgrad_combine([np.array([1.0, 0]), np.array([-1.0, 1])], rng), [0.5, 1.5])
    g = np.array([0.2, -3.0])
    np.testing.assert_array_equal(pcgrad_combine([g], rng), g)


def test_pcgrad_zero_norm_skipped():
    out = pcgrad_combine([np.array([1.0, 2.0]), np.zeros(2)], np.random.default_rng(0))
    np.testing.assert_array_equal(out, [1.0, 2.0])


def pcgrad_projected(g1, g2):
    """The two projected gradients, spelled out for K=2."""
    def proj(a, b):
        d = a @ b
        return a - d / (b @ b) * b if d < 0 else a
    return proj(g1, g2), proj(g2, g1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 20))
def test_pcgrad_two_task_no_conflict_left(seed, dim):
    rng = np.random.default_rng(seed)
    g1, g2 = rng.normal(size=dim), rng.normal(size=dim)
    p1, p2 = pcgrad_projected(g1, g2)
    assert p1 @ g2 >= -1e-12 and p2 @ g1 >= -1e-12
    q1, q2 = pcgrad_project([g1, g2], rng)
    np.testing.assert_allclose(q1, p1, atol=1e-12)
    np.testing.assert_allclose(q2, p2, atol=1e-12)
    np.testing.assert_allclose(pcgrad_combine([g1, g2], rng), p1 + p2, atol=1e-12)


def test_pcgrad_order_is_seeded():
    rng = np.random.default_rng(1)
    gs = [rng.normal(size=5) for _ in range(4)]
    a = pcgrad_combine(gs, np.random.default_rng(7))
    b = pcgrad_combine(gs, np.random.default_rng(7))
    assert a.tobytes() == b.tobytes()


# ----------------------------------------------------------------- graddrop
def test_graddrop_same_sign_is_sum():
    gs = [np.array([1.0, -2.0, 0.5]), np.array([3.0, -0.1, 0.5])]
    np.testing.assert_allclose(graddrop_combine(gs, np.random.default_rng(0)), gs[0] + gs[1])


def test_graddrop_full_leak_is_sum():
    rng = np.random.default_rng(1)
    gs = [rng.normal(size=50) for _ in range(3)]
    np.testing.assert_allclose(graddrop_combine(gs, rng, leak=1.0), sum(gs), atol=1e-14)


def test_graddrop_keep_rate_matches_purity():
    g1, g2 = np.full(100_000, 2.0), np.full(100_000, -1.0)
    out = graddrop_combine([g1, g2], np.random.default_rng(2))
    assert set(np.unique(out)) <= {2.0, -1.0}
    assert abs(np.mean(out == 2.0) - 2 / 3) <= 0.01


def test_graddrop_zero_mass_coordinate():
    out = graddrop_combine([np.array([0.0, 1.0]), np.array([0.0, -1.0])], np.random.default_rng(3))
    assert out[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_graddrop_bounded_by_mass(seed, leak):
    rng = np.random.default_rng(seed)
    gs = [rng.normal(size=30) for _ in range(3)]
    out = graddrop_combine(gs, rng, leak)
    assert np.all(np.abs(out) <= np.abs(np.stack(gs)).sum(axis=0) + 1e-12)


# ------------------------------------------------------------------- cagrad
def test_cagrad_c0_is_mean_exactly():
    rng = np.random.default_rng(0)
    gs = [rng.normal(size=7) for _ in range(3)]
    assert cagrad_combine(gs, 0.0).tobytes() == np.stack(gs).mean(axis=0).tobytes()


@pytest.mark.parametrize("c", [0.1, 0.4, 1.0, 3.0])
def test_cagrad_identical_gradients_closed_form(c):
    g = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(cagrad_combine([g, g], c), (1 + c) / (1 + c * c) * g, atol=1e-12)


def test_cagrad_orthogonal_example():
    np.testing.assert_allclose(cagrad_combine([np.array([1.0, 0]), np.array([0, 1.0])], 0.5), [0.6, 0.6], atol=1e-9)


def test_cagrad_zero_gradients():
    out = cagrad_combine([np.zeros(3), np.zeros(3)], 0.4)
    np.testing.assert_array_equal(out, np.zeros(3))


def test_cagrad_inner_solve_beats_grid():
    rng = np.random.default_rng(11)
    for _ in range(100):
        g1, g2 = rng.normal(size=6), rng.normal(size=6)
        G = np.stack([g1, g2])
        w = cagrad_solve(G @ G.T, 0.4)
        _, f_grid = cagrad_grid(g1, g2, 0.4)
        assert cagrad_objective(w, G @ G.T, 0.4) <= f_grid + 1e-6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_simplex_projection(v):
    w = project_simplex(np.array(v))
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


# ------------------------------------------------------------------ combine
CFG = ModelConfig(input_dim=5, d_model=4, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, dim_feedforward=6, n_aux=2)


def solo_grads(params, x, y, aux):
    out = []
    for k in range(CFG.n_tasks):
        leaves = params.leaves()
        losses = task_losses(forward(leaves, x, CFG), y, aux)
        out.append(np.concatenate([g.reshape(-1) for g in T.grad(losses[k], list(leaves.values()))]))
    return out


@pytest.fixture
def bag():
    rng = np.random.default_rng(4)
    return init_params(CFG), rng.normal(size=(6, 5)), 1, [0.5, -1.2]


def run_combine(name, params, x, y, aux, **hyper):
    b = make_balancer(BalancerSpec.from_name(name, **hyper), CFG.n_tasks)
    leaves = params.leaves()
    return b, b.combine(task_losses(forward(leaves, x, CFG), y, aux), leaves, params)


def test_naive_combine_is_plain_sum(bag):
    params, x, y, aux = bag
    solo = solo_grads(params, x, y, aux)
    _, res = run_combine("naive", params, x, y, aux)
    np.testing.assert_allclose(res.grad[params.shared_slice], sum(g[params.shared_slice] for g in solo), atol=1e-14)
    for k, sl in enumerate(params.task_slices):
        np.testing.assert_array_equal(res.grad[sl], solo[k][sl])


def test_heads_only_see_own_task(bag):
    # tokens interact through decoder self-attention, heads do not
    params, x, y, aux = bag
    solo = solo_grads(params, x, y, aux)
    for k in range(CFG.n_tasks):
        lo, _ = params.offsets[f"task{k}.head.w"]
        _, hi = params.offsets[f"task{k}.head.b"]
        for j in range(CFG.n_tasks):
            if j != k:
                assert not np.any(solo[j][lo:hi])


def test_uncert_cagrad_leaves_heads_untouched(bag):
    params, x, y, aux = bag
    b1, plain = run_combine("uncert", params, x, y, aux)
    b2, surg = run_combine("uncert+cagrad", params, x, y, aux)
    for sl in params.task_slices:
        assert plain.grad[sl].tobytes() == surg.grad[sl].tobytes()
    assert not np.allclose(plain.grad[params.shared_slice], surg.grad[params.shared_slice])
    np.testing.assert_array_equal(plain.weights, 0.5 * np.ones(3))
    assert plain.log_var_grad is not None and plain.log_var_grad.shape == (3,)


def test_pcgrad_without_conflict_equals_naive():
    b = make_balancer("pcgrad", 2)
    n = make_balancer("naive", 2)
    gs = [np.array([1.0, 0.0, 2.0]), np.array([0.0, 3.0, 0.0])]
    np.testing.assert_array_equal(b.merge_shared(gs), n.merge_shared(gs))


@pytest.mark.parametrize("name", sorted(TABLE_ROWS))
def test_every_balancer_combines(bag, name):
    params, x, y, aux = bag
    _, res = run_combine(name, params, x, y, aux)
    assert res.grad.shape == (len(params),) and np.isfinite(res.grad).all()
    assert res.weights.shape == (CFG.n_tasks,)


def test_wrong_loss_count(bag):
    params, x, y, aux = bag
    b = make_balancer("naive", 2)
    leaves = params.leaves()
    with pytest.raises(BalancerError):
        b.combine(task_losses(forward(leaves, x, CFG), y, aux), leaves, params)
