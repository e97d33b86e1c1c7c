"""Training protocol: fold plans, AdamW, epoch loop, early stopping."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .balancing import Balancer, BalancerSpec, make_balancer
from .exceptions import ConfigError, SplitError
from .model import ModelConfig, ModelParams, forward, init_params

__all__ = [
    "TrainConfig",
    "Fold",
    "FoldPlan",
    "AdamW",
    "FitHistory",
    "kfold_split",
    "adamw_step",
    "task_losses",
    "train_epoch",
    "monitor_ce",
    "early_stop",
    "autol_step",
    "fit_model",
    "export_embeddings",
    "derive_seed",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 32
    patience: int = 7
    folds: int = 5
    monitor_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.monitor_fraction < 1.0:
            raise ConfigError(f"monitor_fraction must be in (0, 1), got {self.monitor_fraction}")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --------------------------------------------------------------- fold plans
@dataclass
class Fold:
    train: list[str]
    monitor: list[str]
    test: list[str]


@dataclass
class FoldPlan:
    folds: list[Fold]
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "folds": [asdict(f) for f in self.folds]}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def __len__(self) -> int:
        return len(self.folds)


def stratified_holdout(ids: list[str], labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Split ``ids`` into (rest, held) with about ``fraction`` of each class held.

    Classes with at least two members contribute at least one held-out id.
    """
    held = []
    for cls in np.unique(labels):
        members = [ids[i] for i in np.flatnonzero(labels == cls)]
        members = [members[i] for i in rng.permutation(len(members))]
        if len(members) >= 2:
            k = min(max(1, int(round(fraction * len(members)))), len(members) - 1)
            held += members[:k]
    held_set = set(held)
    return [i for i in ids if i not in held_set], [i for i in ids if i in held_set]


def kfold_split(patients, labels, folds: int = 5, seed: int = 0, monitor_fraction: float = 0.1) -> FoldPlan:
    """Patient-level stratified k-fold plan with a stratified monitor split
    carved out of every training portion. Lists keep the input order."""
    patients = [str(p) for p in patients]
    labels = np.asarray(labels)
    if len(set(patients)) != len(patients):
        raise SplitError("patient ids must be unique")
    if labels.shape != (len(patients),):
        raise SplitError(f"{len(patients)} patients but labels of shape {labels.shape}")
    classes, counts = np.unique(labels, return_counts=True)
    small = [str(c) for c, n in zip(classes, counts) if n < folds]
    if small:
        raise SplitError(f"classes {small} have fewer members than folds={folds}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(patients), dtype=np.int64)
    offset = 0
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        # continue round-robin across classes so fold sizes stay balanced
        assignment[members] = (np.arange(members.size) + offset) % folds
        offset = (offset + members.size) % folds
    out = []
    for f in range(folds):
        test = [p for p, a in zip(patients, assignment) if a == f]
        rest_idx = [i for i, a in enumerate(assignment) if a != f]
        rest = [patients[i] for i in rest_idx]
        train, monitor = stratified_holdout(rest, labels[rest_idx], monitor_fraction, rng)
        out.append(Fold(train=train, monitor=monitor, test=test))
    return FoldPlan(folds=out, seed=int(seed))


# ---------------------------------------------------------------- optimizer
class AdamW:
    """Adam with decoupled weight decay over one flat parameter vector."""

    def __init__(self, size: int, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Update ``theta`` in place and return it."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps) + self.lr * self.weight_decay * theta
        theta -= update
        return theta


def adamw_step(theta: np.ndarray, grads: np.ndarray, state: AdamW | None = None, cfg: TrainConfig | None = None):
    """Functional form: returns (updated copy of theta, optimizer state)."""
    cfg = cfg or TrainConfig()
    if state is None:
        state = AdamW(np.size(theta), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    out = np.array(theta, dtype=np.float64, copy=True)
    state.step(out.reshape(-1), np.asarray(grads, dtype=np.float64).reshape(-1))
    return out, state


# ------------------------------------------------------------------- epochs
def task_losses(out, y: int, aux_row) -> list:
    losses = [T.cross_entropy(out.logits, int(y))]
    for pred, target in zip(out.aux_preds, aux_row):
        losses.append(T.mse(pred, float(target)))
    return losses


def _flat_grad(loss, leaves) -> np.ndarray:
    return np.concatenate([g.reshape(-1) for g in T.grad(loss, leaves.values())])


def train_epoch(
    params: ModelParams,
    balancer: Balancer | None,
    optimizer: AdamW,
    bags,
    y,
    aux,
    order=None,
    log_var_optimizer: AdamW | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One pass over ``bags`` (batch size 1) in ``order``.

    Returns (mean loss per task, mean loss weight per task). Losses are the
    values at the parameters the step was taken from.
    """
    cfg = params.config
    order = range(len(bags)) if order is None else order
    loss_sum = np.zeros(cfg.n_tasks)
    weight_sum = np.zeros(cfg.n_tasks)
    count = 0
    for i in order:
        leaves = params.leaves()
        out = forward(leaves, bags[i], cfg, rng=dropout_rng)
        losses = task_losses(out, y[i], aux[i] if cfg.n_aux else ())
        if balancer is None:
            g = _flat_grad(losses[0], leaves)
            weights = np.ones(1)
        else:
            res = balancer.combine(losses, leaves, params)
            g, weights = res.grad, res.weights
            if res.log_var_grad is not None:
                log_var_optimizer.step(balancer.log_vars, res.log_var_grad)
        optimizer.step(params.flat, g)
        loss_sum += [float(l.data) for l in losses]
        weight_sum += weights
        count += 1
    return loss_sum / max(count, 1), weight_sum / max(count, 1)


def monitor_ce(params: ModelParams, bags, y) -> float:
    """Mean classification cross-entropy over ``bags`` (no graph recorded)."""
    total = 0.0
    for x, label in zip(bags, y):
        total += float(T.cross_entropy(forward(params, x).logits, int(label)).data)
    return total / len(bags)


def early_stop(history, patience: int = 7) -> bool:
    """True once ``patience`` epochs have passed without a new strict minimum."""
    if not len(history):
        raise ValueError("early_stop needs a non-empty history")
    return (len(history) - 1) - int(np.argmin(history)) >= patience


def autol_step(balancer: Balancer, params: ModelParams, train_bag, val_bag, inner_lr: float) -> np.ndarray:
    """First-order Auto-Lambda update of ``balancer.lambdas``.

    ``train_bag`` and ``val_bag`` are ``(features, y, aux_row)`` triples; the
    validation objective is CE plus every auxiliary MSE.
    """
    if val_bag is None:
        raise ConfigError("autol needs a validation bag")
    cfg = params.config
    leaves = params.leaves()
    x, y, a = train_bag
    train_losses = task_losses(forward(leaves, x, cfg), y, a)
    task_grads = [_flat_grad(l, leaves) for l in train_losses]
    leaves = params.leaves()
    xv, yv, av = val_bag
    val_losses = task_losses(forward(leaves, xv, cfg), yv, av)
    val_total = val_losses[0]
    for l in val_losses[1:]:
        val_total = val_total + l
    return balancer.autol_update(_flat_grad(val_total, leaves), task_grads, inner_lr)


# -------------------------------------------------------------------- fit
@dataclass
class FitHistory:
    train_loss: list[list[float]] = field(default_factory=list)
    monitor_ce: list[float] = field(default_factory=list)
    weights: list[list[float]] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def fit_model(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    balancer_spec: BalancerSpec | None,
    train,
    monitor,
    seed: int = 0,
) -> tuple[ModelParams, FitHistory, Balancer | None]:
    """Train one model; ``train``/``monitor`` are (bags, y, aux) triples.

    Early stopping watches the monitor CE; the parameters from the epoch with
    the lowest monitor CE are returned. With ``n_aux == 0`` no balancer is
    built and the run is the single-task baseline.
    """
    model_cfg.validate()
    train_cfg.validate()
    params = init_params(model_cfg)
    X, y, aux = train
    Xm, ym, auxm = monitor
    if not len(Xm):
        raise ConfigError("early stopping needs a non-empty monitor split")
    opt = AdamW(len(params), train_cfg.lr, (train_cfg.beta1, train_cfg.beta2), train_cfg.eps, train_cfg.weight_decay)
    balancer = None
    log_var_opt = None
    if model_cfg.n_aux > 0 and balancer_spec is not None:
        balancer = make_balancer(balancer_spec.with_seed(derive_seed(seed, 2)), model_cfg.n_tasks)
        if balancer.log_vars is not None:
            log_var_opt = AdamW(model_cfg.n_tasks, train_cfg.lr, (train_cfg.beta1, train_cfg.beta2), train_cfg.eps, 0.0)
    shuffle_rng = np.random.default_rng(derive_seed(seed, 1))
    dropout_rng = np.random.default_rng(derive_seed(seed, 3)) if model_cfg.dropout > 0 else None

    hist = FitHistory()
    best_flat, best_ce = params.flat.copy(), np.inf
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = np.arange(len(X)) if epoch == 1 else shuffle_rng.permutation(len(X))
        means, weights = train_epoch(params, balancer, opt, X, y, aux, order, log_var_opt, dropout_rng)
        if balancer is not None:
            balancer.end_epoch(means)
            if balancer.lambdas is not None:
                i = int(balancer.rng.integers(len(X)))
                j = int(balancer.rng.integers(len(Xm)))
                autol_step(balancer, params, (X[i], y[i], aux[i]), (Xm[j], ym[j], auxm[j]), train_cfg.lr)
        ce = monitor_ce(params, Xm, ym)
        hist.train_loss.append([float(v) for v in means])
        hist.monitor_ce.append(ce)
        if balancer is not None:
            hist.weights.append([float(v) for v in weights])
        hist.epochs_run = epoch
        if ce < best_ce:
            best_ce, best_flat = ce, params.flat.copy()
            hist.best_epoch = epoch
        if early_stop(hist.monitor_ce, train_cfg.patience):
            hist.stopped_early = True
            break
    params.flat[:] = best_flat
    return params, hist, balancer


def export_embeddings(params: ModelParams, bags) -> np.ndarray:
    """Classification-token embeddings, one ``d_model`` row per bag."""
    return np.stack([forward(params, x).embedding.data for x in bags]) if len(bags) else np.zeros((0, params.config.d_model))
