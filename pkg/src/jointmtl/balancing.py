"""Task balancing: loss weighting, gradient surgery, and their combinations.

Weighting schemes scale each task loss (naive, dwa, uncert, autol). Gradient
schemes merge per-task gradients of the *shared* parameters (graddrop,
pcgrad, cagrad); each task's own token and head always receive just that
task's (weighted) gradient. Sixteen configurations are supported: the seven
singletons plus every ``{dwa,uncert,autol}+{graddrop,pcgrad,cagrad}`` pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .exceptions import ConfigError
from .model import ModelParams
from .tensor import Tensor

__all__ = [
    "WEIGHTINGS",
    "GRADIENT_METHODS",
    "BALANCER_NAMES",
    "BalancerSpec",
    "Balancer",
    "CombineResult",
    "make_balancer",
    "enumerate_all",
    "dwa_weights",
    "uncert_loss",
    "autol_meta_gradient",
    "pcgrad_project",
    "pcgrad_combine",
    "graddrop_combine",
    "cagrad_objective",
    "cagrad_solve",
    "cagrad_combine",
    "project_simplex",
]

WEIGHTINGS = ("naive", "dwa", "uncert", "autol")
GRADIENT_METHODS = ("graddrop", "pcgrad", "cagrad")
BALANCER_NAMES = (
    WEIGHTINGS
    + GRADIENT_METHODS
    + tuple(f"{w}+{g}" for w in ("dwa", "uncert", "autol") for g in GRADIENT_METHODS)
)
AUTOL_MIN = 1e-4


class BalancerError(ConfigError):
    pass


@dataclass(frozen=True)
class BalancerSpec:
    weighting: str | None = "naive"
    gradient: str | None = None
    dwa_temperature: float = 2.0
    cagrad_c: float = 0.4
    autol_init: float = 0.1
    autol_meta_lr: float = 1e-4
    graddrop_leak: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in BALANCER_NAMES:
            raise BalancerError(
                f"unsupported balancer {self.name!r}; valid names: {', '.join(BALANCER_NAMES)}"
            )
        if self.cagrad_c < 0:
            raise BalancerError(f"cagrad_c must be >= 0, got {self.cagrad_c}")
        if not 0.0 <= self.graddrop_leak <= 1.0:
            raise BalancerError(f"graddrop_leak must be in [0, 1], got {self.graddrop_leak}")
        if self.dwa_temperature <= 0 or self.autol_init <= 0:
            raise BalancerError("dwa_temperature and autol_init must be positive")

    @property
    def name(self) -> str:
        w = self.weighting if self.weighting not in (None, "none") else None
        g = self.gradient if self.gradient not in (None, "none") else None
        if w and g:
            return f"{w}+{g}"
        return w or g or "none"

    @classmethod
    def from_name(cls, name: str, **hyper) -> "BalancerSpec":
        parts = [p.strip() for p in str(name).split("+")]
        if len(parts) == 1:
            w, g = (parts[0], None) if parts[0] in WEIGHTINGS else (None, parts[0])
        elif len(parts) == 2:
            w, g = parts
        else:
            w, g = name, None
        return cls(weighting=w, gradient=g, **hyper)

    def with_seed(self, seed: int) -> "BalancerSpec":
        return replace(self, seed=seed)


def enumerate_all(**hyper) -> list[BalancerSpec]:
    return [BalancerSpec.from_name(n, **hyper) for n in BALANCER_NAMES]


# ------------------------------------------------------------------ weighting
def dwa_weights(history: list[np.ndarray], epoch: int, n_tasks: int, temperature: float = 2.0) -> np.ndarray:
    """Dynamic weight averaging for 1-based ``epoch``.

    ``history`` holds epoch-mean losses of previous epochs (oldest first); the
    last two are used. Epochs 1 and 2 get all-ones.
    """
    if epoch < 1:
        raise ValueError(f"epoch is 1-based, got {epoch}")
    if epoch <= 2 or len(history) < 2:
        return np.ones(n_tasks)
    prev, prev2 = np.asarray(history[-1], float), np.asarray(history[-2], float)
    safe = prev2 != 0
    ratio = np.where(safe, prev / np.where(safe, prev2, 1.0), 1.0)
    z = ratio / temperature
    e = np.exp(z - z.max())
    return n_tasks * e / e.sum()


def uncert_loss(losses: list[Tensor], log_vars: Tensor) -> Tensor:
    """sum_k 0.5 * exp(-s_k) * L_k + 0.5 * s_k with s = log sigma^2."""
    total = None
    for k, loss in enumerate(losses):
        s = log_vars[k]
        term = T.exp(-s) * loss * 0.5 + s * 0.5
        total = term if total is None else total + term
    return total


def autol_meta_gradient(val_grad: np.ndarray, task_grads: list[np.ndarray], inner_lr: float) -> np.ndarray:
    """First-order d L_val / d lambda_k = -inner_lr * <grad L_val, grad L_k>."""
    return np.array([-inner_lr * float(np.dot(val_grad, g)) for g in task_grads])


# ----------------------------------------------------------- gradient surgery
def pcgrad_project(grads: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """Each task gradient projected off the conflicting original gradients, in random order."""
    originals = [np.asarray(g, dtype=np.float64) for g in grads]
    k = len(originals)
    sq_norms = [float(np.dot(g, g)) for g in originals]
    out = []
    for i in range(k):
        gi = originals[i].copy()
        others = [j for j in range(k) if j != i]
        for j in rng.permutation(others) if others else ():
            gj = originals[j]
            dot = float(np.dot(gi, gj))
            if dot < 0 and sq_norms[j] > 0:
                gi -= (dot / sq_norms[j]) * gj
        out.append(gi)
    return out


def pcgrad_combine(grads: list[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    out = np.zeros_like(np.asarray(grads[0], dtype=np.float64))
    for g in pcgrad_project(grads, rng):
        out += g
    return out


def graddrop_combine(grads: list[np.ndarray], rng: np.random.Generator, leak: float = 0.0) -> np.ndarray:
    """Gradient sign dropout, one sign choice per coordinate."""
    G = np.stack([np.asarray(g, dtype=np.float64) for g in grads])
    total = G.sum(axis=0)
    mass = np.abs(G).sum(axis=0)
    nonzero = mass > 0
    purity = 0.5 * (1.0 + np.divide(total, mass, out=np.zeros_like(total), where=nonzero))
    keep_positive = rng.random(total.shape) < purity
    mask = np.where(keep_positive, G > 0, G < 0)
    out = (G * (leak + (1.0 - leak) * mask)).sum(axis=0)
    return np.where(nonzero, out, 0.0)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    if v.size == 2:
        t = min(max(0.5 * (v[0] - v[1] + 1.0), 0.0), 1.0)
        return np.array([t, 1.0 - t])
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u * idx > css - 1.0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def cagrad_objective(w: np.ndarray, gram: np.ndarray, c: float) -> float:
    """F(w) = g_w . g0 + c * |g0| * |g_w| evaluated from the Gram matrix."""
    k = gram.shape[0]
    b = gram.sum(axis=1) / k
    g0_norm = np.sqrt(max(gram.sum(), 0.0)) / k
    return float(w @ b + c * g0_norm * np.sqrt(max(w @ gram @ w, 0.0)))


def cagrad_solve(gram: np.ndarray, c: float, iters: int = 200) -> np.ndarray:
    """Minimize :func:`cagrad_objective` over the simplex by projected gradient descent.

    Starts from uniform weights with step 0.25 / L, ``L = c |g0| lambda_max(G) / |g_w|``.
    Each iteration backtracks (halving) until the local quadratic upper bound
    holds, then lets the next trial step grow by 2x. Stops early once the
    iterate no longer moves.
    """
    k = gram.shape[0]
    w = np.full(k, 1.0 / k)
    if c == 0 or k == 1:
        return w
    b = gram.sum(axis=1) / k
    coef = c * np.sqrt(max(gram.sum(), 0.0)) / k
    lam_max = float(np.linalg.eigvalsh(gram)[-1])
    if coef == 0 or lam_max <= 0:
        return w

    def value(x):
        return float(x @ b) + coef * np.sqrt(max(float(x @ gram @ x), 0.0))

    f = value(w)
    gw_norm = np.sqrt(max(float(w @ gram @ w), 0.0))
    step = 0.25 * max(gw_norm, 1e-12 * np.sqrt(lam_max)) / (coef * lam_max)
    for _ in range(iters):
        grad = b + coef * (gram @ w) / gw_norm if gw_norm > 0 else b
        for _ in range(60):
            cand = project_simplex(w - step * grad)
            delta = cand - w
            f_cand = value(cand)
            if f_cand <= f + float(grad @ delta) + float(delta @ delta) / (2.0 * step):
                break
            step *= 0.5
        if not np.any(delta) or f_cand >= f:
            break
        w, f = cand, f_cand
        gw_norm = np.sqrt(max(float(w @ gram @ w), 0.0))
        step *= 2.0
    return w


def cagrad_combine(grads: list[np.ndarray], c: float = 0.4) -> np.ndarray:
    """Conflict-averse update d = (g0 + c|g0|/|g_w| g_w) / (1 + c^2)."""
    G = np.stack([np.asarray(g, dtype=np.float64) for g in grads])
    g0 = G.mean(axis=0)
    if c == 0:
        return g0
    gram = G @ G.T
    w = cagrad_solve(gram, c)
    gw = w @ G
    gw_norm = np.linalg.norm(gw)
    if gw_norm == 0:
        return g0 / (1.0 + c * c)
    return (g0 + (c * np.linalg.norm(g0) / gw_norm) * gw) / (1.0 + c * c)


# ------------------------------------------------------------------- state
@dataclass
class CombineResult:
    grad: np.ndarray
    weights: np.ndarray
    log_var_grad: np.ndarray | None = None


@dataclass
class Balancer:
    """Per-run balancing state.

    ``history`` keeps the last two epoch-mean task losses (dwa), ``log_vars``
    the trainable s_k (uncert) and ``lambdas`` the Auto-Lambda weights.
    """

    spec: BalancerSpec
    n_tasks: int
    history: list[np.ndarray] = field(default_factory=list)
    log_vars: np.ndarray | None = None
    lambdas: np.ndarray | None = None
    epoch: int = 1
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.n_tasks < 1:
            raise BalancerError("need at least one task")
        self.rng = np.random.default_rng(self.spec.seed)
        if self.spec.weighting == "uncert":
            self.log_vars = np.zeros(self.n_tasks)
        if self.spec.weighting == "autol":
            self.lambdas = np.full(self.n_tasks, float(self.spec.autol_init))

    @property
    def name(self) -> str:
        return self.spec.name

    def loss_weights(self) -> np.ndarray:
        w = self.spec.weighting
        if w == "dwa":
            return dwa_weights(self.history, self.epoch, self.n_tasks, self.spec.dwa_temperature)
        if w == "uncert":
            return 0.5 * np.exp(-self.log_vars)
        if w == "autol":
            return self.lambdas.copy()
        return np.ones(self.n_tasks)

    def end_epoch(self, epoch_means) -> None:
        self.history = (self.history + [np.asarray(epoch_means, dtype=np.float64)])[-2:]
        self.epoch += 1

    def merge_shared(self, shared: list[np.ndarray]) -> np.ndarray:
        g = self.spec.gradient
        if g == "pcgrad":
            return pcgrad_combine(shared, self.rng)
        if g == "graddrop":
            return graddrop_combine(shared, self.rng, self.spec.graddrop_leak)
        if g == "cagrad":
            return cagrad_combine(shared, self.spec.cagrad_c)
        out = shared[0].copy()
        for s in shared[1:]:
            out += s
        return out

    def combine(self, losses: list[Tensor], leaves: dict[str, Tensor], params: ModelParams) -> CombineResult:
        """Turn per-task losses into one flat gradient for ``params``.

        One backward pass per task; the shared slice is merged by the gradient
        method (plain sum without one), each task slice keeps only its own
        task's weighted gradient.
        """
        if len(losses) != self.n_tasks:
            raise BalancerError(f"expected {self.n_tasks} task losses, got {len(losses)}")
        weights = self.loss_weights()
        order = list(leaves.values())
        per_task = []
        for k, loss in enumerate(losses):
            g = T.grad(loss, order)
            per_task.append(weights[k] * np.concatenate([x.reshape(-1) for x in g]))
        out = np.empty(len(params))
        sh = params.shared_slice
        out[sh] = self.merge_shared([g[sh] for g in per_task])
        for k, g in enumerate(per_task):
            sl = params.task_slices[k]
            out[sl] = g[sl]
        log_var_grad = None
        if self.log_vars is not None:
            s = Tensor(self.log_vars, requires_grad=True)
            (log_var_grad,) = T.grad(uncert_loss([Tensor(l.data) for l in losses], s), [s])
        return CombineResult(grad=out, weights=weights, log_var_grad=log_var_grad)

    def autol_update(self, val_grad: np.ndarray, task_grads: list[np.ndarray], inner_lr: float) -> np.ndarray:
        meta = autol_meta_gradient(val_grad, task_grads, inner_lr)
        self.lambdas = np.maximum(self.lambdas - self.spec.autol_meta_lr * meta, AUTOL_MIN)
        return meta


def make_balancer(spec: BalancerSpec | str, n_tasks: int) -> Balancer:
    if isinstance(spec, str):
        spec = BalancerSpec.from_name(spec)
    return Balancer(spec=spec, n_tasks=n_tasks)
