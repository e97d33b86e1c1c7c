"""Bag-of-features Transformer with one decoder query token per task.

Patch features are linearly projected to ``d_model``, self-attended by an
encoder stack, then read out by a decoder whose queries are learned tokens:
token 0 feeds the 2-logit classification head, tokens ``1..n_aux`` feed one
scalar regression head each. No positional information is used anywhere.

All learnable values live in one flat float64 buffer (:class:`ModelParams`).
The layout puts the shared block (projection, encoder, decoder) first and then
one contiguous block per task (its token and head), so the shared/task split
used by gradient surgery is a pair of slices.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, FormatError, InputError
from .tensor import ShapeError, Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ForwardOutput",
    "ConfigError",
    "InputError",
    "CheckpointError",
    "init_params",
    "forward",
    "attention",
    "multihead_attention",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"MTLP"
CHECKPOINT_VERSION = 1


class CheckpointError(FormatError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 768
    d_model: int = 384
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 8
    dim_feedforward: int = 768
    n_aux: int = 0
    dropout: float = 0.0
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.input_dim <= 0 or self.d_model <= 0 or self.dim_feedforward <= 0:
            raise ConfigError(f"dimensions must be positive: {self}")
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 1:
            raise ConfigError("need >= 0 encoder layers and >= 1 decoder layer")
        if self.n_aux < 0:
            raise ConfigError(f"n_aux must be >= 0, got {self.n_aux}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    @property
    def n_tasks(self) -> int:
        return 1 + self.n_aux

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------- layout
def _attn_layout(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for proj in ("q", "k", "v", "o"):
        out += [(f"{prefix}.w{proj}", (d, d)), (f"{prefix}.b{proj}", (d,))]
    return out


def _ffn_layout(prefix: str, d: int, ff: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.w1", (d, ff)), (f"{prefix}.b1", (ff,)), (f"{prefix}.w2", (ff, d)), (f"{prefix}.b2", (d,))]


def _norm_layout(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def param_layout(cfg: ModelConfig) -> tuple[list[tuple[str, tuple[int, ...]]], list[list[tuple[str, tuple[int, ...]]]]]:
    """(shared entries, per-task entries) in flatten order."""
    d, ff = cfg.d_model, cfg.dim_feedforward
    shared = [("proj.w", (cfg.input_dim, d)), ("proj.b", (d,))]
    for i in range(cfg.n_encoder_layers):
        p = f"enc{i}"
        shared += _attn_layout(f"{p}.attn", d) + _norm_layout(f"{p}.norm1", d)
        shared += _ffn_layout(f"{p}.ffn", d, ff) + _norm_layout(f"{p}.norm2", d)
    for i in range(cfg.n_decoder_layers):
        p = f"dec{i}"
        shared += _attn_layout(f"{p}.self", d) + _norm_layout(f"{p}.norm1", d)
        shared += _attn_layout(f"{p}.cross", d) + _norm_layout(f"{p}.norm2", d)
        shared += _ffn_layout(f"{p}.ffn", d, ff) + _norm_layout(f"{p}.norm3", d)
    tasks = []
    for k in range(cfg.n_tasks):
        width = 2 if k == 0 else 1
        tasks.append([(f"task{k}.token", (d,)), (f"task{k}.head.w", (d, width)), (f"task{k}.head.b", (width,))])
    return shared, tasks


class ModelParams:
    """Named views into one contiguous float64 vector.

    Flatten order: shared entries in :func:`param_layout` order, then task 0
    (classification token + head), then tasks ``1..n_aux``.
    """

    def __init__(self, cfg: ModelConfig, flat: np.ndarray | None = None):
        self.config = cfg
        shared, tasks = param_layout(cfg)
        self.names: list[str] = []
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        bounds = []
        for group in [shared] + tasks:
            start = pos
            for name, shape in group:
                size = int(np.prod(shape))
                self.names.append(name)
                self.shapes[name] = shape
                self.offsets[name] = (pos, pos + size)
                pos += size
            bounds.append((start, pos))
        self.shared_slice = slice(*bounds[0])
        self.task_slices = [slice(*b) for b in bounds[1:]]
        if flat is None:
            flat = np.zeros(pos)
        elif flat.shape != (pos,):
            raise ValueError(f"expected a flat vector of length {pos}, got shape {flat.shape}")
        self.flat = np.ascontiguousarray(flat, dtype=np.float64)

    def __len__(self) -> int:
        return self.flat.size

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi = self.offsets[name]
        return self.flat[lo:hi].reshape(self.shapes[name])

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def items(self):
        return ((n, self[n]) for n in self.names)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())

    def subset_slice(self, subset) -> slice:
        """``"shared"``, ``"all"`` or ``("task", k)``."""
        if subset == "all":
            return slice(0, self.flat.size)
        if subset == "shared":
            return self.shared_slice
        if isinstance(subset, tuple) and len(subset) == 2 and subset[0] == "task":
            return self.task_slices[subset[1]]
        raise ValueError(f"unknown parameter subset {subset!r}")

    def subset_names(self, subset) -> list[str]:
        sl = self.subset_slice(subset)
        return [n for n in self.names if sl.start <= self.offsets[n][0] < sl.stop]

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {n: Tensor(self[n], requires_grad=requires_grad, name=n) for n in self.names}

    def flatten_grads(self, grads: dict[str, np.ndarray], subset="all") -> np.ndarray:
        names = self.subset_names(subset)
        return np.concatenate([np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in names])

    def unflatten(self, vec: np.ndarray, subset="all") -> dict[str, np.ndarray]:
        names = self.subset_names(subset)
        sl = self.subset_slice(subset)
        if vec.shape != (sl.stop - sl.start,):
            raise ValueError(f"{subset!r} needs a vector of length {sl.stop - sl.start}, got {vec.shape}")
        out = {}
        for n in names:
            lo, hi = self.offsets[n]
            out[n] = vec[lo - sl.start : hi - sl.start].reshape(self.shapes[n]).copy()
        return out


def init_params(cfg: ModelConfig) -> ModelParams:
    """Seeded init: linear weights/biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    norm gains 1 and biases 0, tokens ~ N(0, 0.02^2)."""
    cfg.validate()
    params = ModelParams(cfg)
    rng = np.random.default_rng(cfg.seed)
    for name in params.names:
        view = params[name]
        leaf = name.rsplit(".", 1)[-1]
        if ".norm" in name:
            view[...] = 1.0 if leaf == "gain" else 0.0
        elif leaf == "token":
            view[...] = rng.normal(0.0, 0.02, size=view.shape)
        else:
            fan_in = _fan_in(params, name)
            bound = 1.0 / math.sqrt(fan_in)
            view[...] = rng.uniform(-bound, bound, size=view.shape)
    return params


def _fan_in(params: ModelParams, name: str) -> int:
    prefix, leaf = name.rsplit(".", 1)
    if leaf.startswith("w"):
        return params.shapes[name][0]
    weight = prefix + ".w" + leaf[1:]
    return params.shapes[weight][0]


# ---------------------------------------------------------------- forward
@dataclass
class ForwardOutput:
    logits: Tensor
    aux_preds: list[Tensor]
    embedding: Tensor

    def probability(self) -> float:
        z = self.logits.data
        return float(1.0 / (1.0 + np.exp(z[0] - z[1])))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated.

    ``q`` is (n_q, d), ``k``/``v`` are (n_k, d); no projections are applied.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention expects 2-D inputs, got {q.shape}, {k.shape}, {v.shape}")
    nq, d = q.shape
    nk = k.shape[0]
    if k.shape[1] != d or v.shape != k.shape:
        raise ShapeError(f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    if d % n_heads:
        raise ShapeError(f"width {d} is not divisible by {n_heads} heads")
    dh = d // n_heads
    qh = q.reshape(nq, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(nk, n_heads, dh).transpose(1, 2, 0)
    vh = v.reshape(nk, n_heads, dh).transpose(1, 0, 2)
    weights = T.softmax((qh @ kh) * (1.0 / math.sqrt(dh)), axis=-1)
    return (weights @ vh).transpose(1, 0, 2).reshape(nq, d)


def multihead_attention(query: Tensor, source: Tensor, p: dict[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    q = query @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = source @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = source @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    return attention(q, k, v, n_heads) @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def _ffn(x: Tensor, p: dict[str, Tensor], prefix: str, rate: float, rng) -> Tensor:
    h = T.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return T.dropout(h, rate, rng) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _norm(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"])


def canonical_order(features: np.ndarray) -> np.ndarray:
    """Row permutation that sorts patches lexicographically.

    Applied before the encoder so that outputs do not depend on the order in
    which patches are stored, down to the last bit.
    """
    return np.lexsort(features.T[::-1])


def forward(
    params: ModelParams | dict[str, Tensor],
    features: np.ndarray,
    cfg: ModelConfig | None = None,
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Run one bag (n, input_dim) through the model.

    ``params`` is either a :class:`ModelParams` (inference, no graph recorded)
    or a dict of leaf tensors from :meth:`ModelParams.leaves`. ``rng`` enables
    dropout when the config asks for it.
    """
    if isinstance(params, ModelParams):
        cfg = params.config
        p = params.leaves(requires_grad=False)
    else:
        if cfg is None:
            raise ConfigError("forward() with raw leaves needs the ModelConfig")
        p = params
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError(f"a bag needs shape (n >= 1, {cfg.input_dim}), got {x.shape}")
    if x.shape[1] != cfg.input_dim:
        raise ShapeError(f"bag width {x.shape[1]} does not match input_dim {cfg.input_dim}")
    x = x[canonical_order(x)]
    rate = cfg.dropout

    h = Tensor(x) @ p["proj.w"] + p["proj.b"]
    for i in range(cfg.n_encoder_layers):
        pre = f"enc{i}"
        h = _norm(h + T.dropout(multihead_attention(h, h, p, f"{pre}.attn", cfg.n_heads), rate, rng), p, f"{pre}.norm1")
        h = _norm(h + T.dropout(_ffn(h, p, f"{pre}.ffn", rate, rng), rate, rng), p, f"{pre}.norm2")

    t = T.concat([p[f"task{k}.token"].reshape(1, cfg.d_model) for k in range(cfg.n_tasks)], axis=0)
    for i in range(cfg.n_decoder_layers):
        pre = f"dec{i}"
        t = _norm(t + T.dropout(multihead_attention(t, t, p, f"{pre}.self", cfg.n_heads), rate, rng), p, f"{pre}.norm1")
        t = _norm(t + T.dropout(multihead_attention(t, h, p, f"{pre}.cross", cfg.n_heads), rate, rng), p, f"{pre}.norm2")
        t = _norm(t + T.dropout(_ffn(t, p, f"{pre}.ffn", rate, rng), rate, rng), p, f"{pre}.norm3")

    embedding = t[0]
    logits = (embedding.reshape(1, cfg.d_model) @ p["task0.head.w"]).reshape(2) + p["task0.head.b"]
    aux = []
    for k in range(1, cfg.n_tasks):
        pred = (t[k].reshape(1, cfg.d_model) @ p[f"task{k}.head.w"]).reshape(1) + p[f"task{k}.head.b"]
        aux.append(pred.reshape(()))
    return ForwardOutput(logits=logits, aux_preds=aux, embedding=embedding)


# ------------------------------------------------------------- checkpoints
def save_checkpoint(params: ModelParams, path) -> None:
    """``MTLP`` | u32 version | u32 config length | config JSON | u64 count | f64 values (all LE)."""
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", params.flat.size))
    buf.write(params.flat.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header at byte {len(raw)}")
    version, clen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte 4")
    end = 12 + clen
    if len(raw) < end + 8:
        raise CheckpointError(f"{path}: truncated config at byte {len(raw)}")
    try:
        cfg = ModelConfig.from_dict(json.loads(raw[12:end].decode("utf-8"))).validate()
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config at byte 12: {exc}") from exc
    (count,) = struct.unpack_from("<Q", raw, end)
    body = raw[end + 8 :]
    if len(body) != 8 * count:
        raise CheckpointError(f"{path}: expected {8 * count} parameter bytes at byte {end + 8}, found {len(body)}")
    params = ModelParams(cfg)
    if count != params.flat.size:
        raise CheckpointError(f"{path}: {count} values stored but config needs {params.flat.size}")
    params.flat[:] = np.frombuffer(body, dtype="<f8")
    return params
