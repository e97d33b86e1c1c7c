"""scikit-learn compatible front end for the joint multi-task model.

``X`` is a sequence of bags, each an ``(n_patches, n_features)`` array with
its own ``n_patches``. The main target is binary; auxiliary regression
targets are passed to :meth:`JointMTLClassifier.fit` as ``aux``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .balancing import BalancerSpec
from .exceptions import InputError
from .model import ModelConfig, ModelParams, forward
from .training import TrainConfig, derive_seed, export_embeddings, fit_model, stratified_holdout

__all__ = ["JointMTLClassifier", "check_bags", "check_aux"]


def check_bags(X, n_features: int | None = None) -> list[np.ndarray]:
    """Validate a sequence of bags and return float64 copies.

    Every bag must be 2-D with at least one row, finite, and share one width
    (``n_features`` when given).
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise InputError("X must be a sequence of 2-D bags, not a single 2-D array")
    try:
        bags = [np.asarray(getattr(b, "features", b), dtype=np.float64) for b in X]
    except (TypeError, ValueError) as exc:
        raise InputError(f"could not read bags: {exc}") from exc
    if not bags:
        raise InputError("X contains no bags")
    widths = set()
    for i, b in enumerate(bags):
        if b.ndim != 2 or b.shape[0] == 0:
            raise InputError(f"bag {i} must have shape (n >= 1, d), got {b.shape}")
        if not np.isfinite(b).all():
            raise InputError(f"bag {i} contains non-finite values")
        widths.add(b.shape[1])
    if len(widths) != 1:
        raise InputError(f"bags have differing widths {sorted(widths)}")
    width = widths.pop()
    if n_features is not None and width != n_features:
        raise InputError(f"bags have {width} features, estimator was fitted with {n_features}")
    return bags


def check_aux(aux, n_samples: int) -> np.ndarray:
    if aux is None:
        return np.zeros((n_samples, 0))
    a = np.asarray(aux, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] != n_samples:
        raise InputError(f"aux must have shape ({n_samples}, n_aux), got {a.shape}")
    if not np.isfinite(a).all():
        raise InputError("aux contains missing or non-finite values")
    return a


class JointMTLClassifier(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Bag classifier trained jointly with auxiliary regression tasks.

    Parameters mirror :class:`ModelConfig`, :class:`TrainConfig` and
    :class:`BalancerSpec`. ``balancer`` is one of the 16 balancer names; it is
    ignored when no ``aux`` targets are given (single-task baseline).
    ``transform`` returns the classification-token embeddings.

    Attributes
    ----------
    classes_ : ndarray of the two class labels
    params_ : fitted :class:`ModelParams`
    history_ : :class:`FitHistory` of the training run
    aux_mean_, aux_std_ : training statistics used to z-score ``aux``
    """

    def __init__(
        self,
        d_model=384,
        n_heads=8,
        n_encoder_layers=2,
        n_decoder_layers=2,
        dim_feedforward=768,
        dropout=0.0,
        balancer="naive",
        balancer_params=None,
        lr=1e-4,
        max_epochs=32,
        patience=7,
        monitor_fraction=0.1,
        weight_decay=0.01,
        betas=(0.9, 0.999),
        eps=1e-8,
        random_state=0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_encoder_layers = n_encoder_layers
        self.n_decoder_layers = n_decoder_layers
        self.dim_feedforward = dim_feedforward
        self.dropout = dropout
        self.balancer = balancer
        self.balancer_params = balancer_params
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.monitor_fraction = monitor_fraction
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.random_state = random_state

    @classmethod
    def from_configs(cls, model_cfg: ModelConfig, train_cfg: TrainConfig, spec: BalancerSpec | None, random_state=0):
        hyper = {}
        if spec is not None:
            hyper = {k: v for k, v in spec.__dict__.items() if k not in ("weighting", "gradient", "seed")}
        return cls(
            d_model=model_cfg.d_model,
            n_heads=model_cfg.n_heads,
            n_encoder_layers=model_cfg.n_encoder_layers,
            n_decoder_layers=model_cfg.n_decoder_layers,
            dim_feedforward=model_cfg.dim_feedforward,
            dropout=model_cfg.dropout,
            balancer=None if spec is None else spec.name,
            balancer_params=hyper or None,
            lr=train_cfg.lr,
            max_epochs=train_cfg.max_epochs,
            patience=train_cfg.patience,
            monitor_fraction=train_cfg.monitor_fraction,
            weight_decay=train_cfg.weight_decay,
            betas=(train_cfg.beta1, train_cfg.beta2),
            eps=train_cfg.eps,
            random_state=random_state,
        )

    # ------------------------------------------------------------ helpers
    def _seed(self) -> int:
        rs = self.random_state
        if rs is None:
            return int(np.random.SeedSequence().generate_state(1)[0])
        if isinstance(rs, np.random.Generator):
            return int(rs.integers(2**32))
        return int(rs)

    def _spec(self) -> BalancerSpec | None:
        if self.balancer in (None, "baseline", "none"):
            return None
        if isinstance(self.balancer, BalancerSpec):
            return self.balancer
        return BalancerSpec.from_name(self.balancer, **(self.balancer_params or {}))

    def _train_config(self) -> TrainConfig:
        b1, b2 = self.betas
        return TrainConfig(
            lr=self.lr,
            max_epochs=self.max_epochs,
            patience=self.patience,
            monitor_fraction=self.monitor_fraction,
            beta1=b1,
            beta2=b2,
            eps=self.eps,
            weight_decay=self.weight_decay,
        ).validate()

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y).reshape(-1)
        classes = np.unique(y)
        if classes.size != 2:
            raise InputError(f"the main target must have exactly two classes, got {classes.tolist()}")
        self.classes_ = classes
        return np.searchsorted(classes, y)

    # ---------------------------------------------------------------- API
    def fit(self, X, y, aux=None, eval_set=None):
        """Fit on bags ``X`` with labels ``y`` and optional ``aux`` (n, n_aux).

        ``eval_set=(X_mon, y_mon[, aux_mon])`` drives early stopping; when
        omitted a stratified ``monitor_fraction`` of the data is held out.
        """
        bags = check_bags(X)
        y_enc = self._encode(y)
        if len(y_enc) != len(bags):
            raise InputError(f"{len(bags)} bags but {len(y_enc)} labels")
        aux = check_aux(aux, len(bags))
        seed = self._seed()
        train_cfg = self._train_config()
        spec = self._spec()

        if eval_set is None:
            ids = [str(i) for i in range(len(bags))]
            rest, held = stratified_holdout(ids, y_enc, self.monitor_fraction, np.random.default_rng(derive_seed(seed, 4)))
            tr, mo = [int(i) for i in rest], [int(i) for i in held]
            Xm, ym, auxm = [bags[i] for i in mo], y_enc[mo], aux[mo]
            bags, y_enc, aux = [bags[i] for i in tr], y_enc[tr], aux[tr]
        else:
            Xm = check_bags(eval_set[0], bags[0].shape[1])
            ym = np.searchsorted(self.classes_, np.asarray(eval_set[1]).reshape(-1))
            auxm = check_aux(eval_set[2] if len(eval_set) > 2 else None, len(Xm))
            if auxm.shape[1] != aux.shape[1]:
                raise InputError("eval_set aux must have the same columns as aux")

        self.aux_mean_ = aux.mean(axis=0) if aux.shape[1] else np.zeros(0)
        std = aux.std(axis=0) if aux.shape[1] else np.ones(0)
        self.aux_std_ = np.where(std > 0, std, 1.0)
        z = (aux - self.aux_mean_) / self.aux_std_
        zm = (auxm - self.aux_mean_) / self.aux_std_

        model_cfg = ModelConfig(
            input_dim=bags[0].shape[1],
            d_model=self.d_model,
            n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers,
            n_heads=self.n_heads,
            dim_feedforward=self.dim_feedforward,
            n_aux=aux.shape[1],
            dropout=self.dropout,
            seed=derive_seed(seed, 0),
        ).validate()
        self.params_, self.history_, self.balancer_ = fit_model(
            model_cfg, train_cfg, spec, (bags, y_enc, z), (Xm, ym, zm), seed=seed
        )
        self.n_features_in_ = model_cfg.input_dim
        self.n_aux_ = model_cfg.n_aux
        return self

    @classmethod
    def from_params(cls, params: ModelParams, classes=(0, 1), aux_mean=None, aux_std=None, **kwargs):
        """Wrap already-trained parameters (e.g. a loaded checkpoint)."""
        cfg = params.config
        est = cls(
            d_model=cfg.d_model,
            n_heads=cfg.n_heads,
            n_encoder_layers=cfg.n_encoder_layers,
            n_decoder_layers=cfg.n_decoder_layers,
            dim_feedforward=cfg.dim_feedforward,
            dropout=cfg.dropout,
            **kwargs,
        )
        est.params_ = params
        est.classes_ = np.asarray(classes)
        est.n_features_in_ = cfg.input_dim
        est.n_aux_ = cfg.n_aux
        est.aux_mean_ = np.zeros(cfg.n_aux) if aux_mean is None else np.asarray(aux_mean, float)
        est.aux_std_ = np.ones(cfg.n_aux) if aux_std is None else np.asarray(aux_std, float)
        return est

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        bags = check_bags(X, self.n_features_in_)
        p1 = np.array([forward(self.params_, b).probability() for b in bags])
        return np.column_stack([1.0 - p1, p1])

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        bags = check_bags(X, self.n_features_in_)
        return np.array([np.diff(forward(self.params_, b).logits.data)[0] for b in bags])

    def predict(self, X) -> np.ndarray:
        return self.classes_[(self.decision_function(X) > 0).astype(int)]

    def predict_aux(self, X) -> np.ndarray:
        """Auxiliary predictions on the original (un-standardized) scale."""
        check_is_fitted(self, "params_")
        bags = check_bags(X, self.n_features_in_)
        z = np.array([[float(p.data) for p in forward(self.params_, b).aux_preds] for b in bags]).reshape(len(bags), -1)
        return z * self.aux_std_ + self.aux_mean_

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return export_embeddings(self.params_, check_bags(X, self.n_features_in_))

    def _more_tags(self):
        return {"X_types": ["3darray"], "requires_y": True}

    def __sklearn_is_fitted__(self):
        return hasattr(self, "params_")
