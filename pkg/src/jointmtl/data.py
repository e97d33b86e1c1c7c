"""Feature bags on disk, clinical tables, cohort joins and a synthetic generator.

MTLF layout (little-endian)::

    bytes 0-3   b"MTLF"
    bytes 4-7   u32 version (1)
    bytes 8-11  u32 n  (patches, >= 1)
    bytes 12-15 u32 d  (feature width, >= 1)
    then n*d float32, row-major

A cohort on disk is a ``manifest.json`` (``{"version", "dim", "slides":
[{"patient", "file", "n"}]}``, file paths relative to the manifest) plus a
clinical CSV with a ``PATIENT`` column; blank cells are missing values.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import CohortError, ConfigError, FormatError

__all__ = [
    "FeatureBag",
    "CohortTable",
    "Cohort",
    "SynthSpec",
    "write_features",
    "read_features",
    "read_manifest",
    "read_clinical",
    "join_cohort",
    "load_cohort",
    "synth_cohort",
    "write_cohort",
]

MAGIC = b"MTLF"
VERSION = 1
HEADER = struct.Struct("<4sIII")
MANIFEST_VERSION = 1
PATIENT_COLUMN = "PATIENT"


@dataclass
class FeatureBag:
    patient_id: str
    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise FormatError(f"bag {self.patient_id!r} needs shape (n >= 1, d >= 1), got {f.shape}")
        # stored precision is float32; keep the in-memory copy exactly representable
        self.features = f.astype(np.float32).astype(np.float64)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def write_features(bag: FeatureBag, path) -> None:
    n, d = bag.features.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, d))
        fh.write(bag.features.astype("<f4").tobytes())


def read_features(path, patient_id: str | None = None) -> FeatureBag:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0, path)
    if len(raw) < HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {HEADER.size} bytes", len(raw), path)
    _, version, n, d = HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    if n == 0:
        raise FormatError("bag has n = 0 patches", 8, path)
    if d == 0:
        raise FormatError("feature width d = 0", 12, path)
    expected = HEADER.size + 4 * n * d
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "trailing bytes in"
        raise FormatError(f"{kind} file: {len(raw)} bytes, header implies {expected}", min(len(raw), expected), path)
    feats = np.frombuffer(raw, dtype="<f4", offset=HEADER.size, count=n * d).reshape(n, d)
    return FeatureBag(patient_id or path.stem, feats)


# ------------------------------------------------------------------ tables
@dataclass
class CohortTable:
    """Patient-level targets; missing values are NaN.

    ``text_cells`` lists non-numeric cells per column as (line, text); they
    only matter when that column is requested as a target.
    """

    patients: list[str]
    columns: dict[str, np.ndarray]
    text_cells: dict[str, list[tuple[int, str]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patients)


@dataclass
class Cohort:
    bags: list[FeatureBag]
    y: np.ndarray
    aux: np.ndarray
    target: str
    aux_names: list[str]
    exclusions: dict[str, str] = field(default_factory=dict)

    @property
    def patients(self) -> list[str]:
        return [b.patient_id for b in self.bags]

    @property
    def dim(self) -> int:
        return self.bags[0].dim

    def __len__(self) -> int:
        return len(self.bags)

    def features(self) -> list[np.ndarray]:
        return [b.features for b in self.bags]

    def subset(self, idx) -> "Cohort":
        idx = list(idx)
        return Cohort(
            bags=[self.bags[i] for i in idx],
            y=self.y[idx],
            aux=self.aux[idx],
            target=self.target,
            aux_names=list(self.aux_names),
        )


def read_manifest(path) -> tuple[dict, list[dict]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg} at line {exc.lineno} column {exc.colno}", exc.pos, path)
    if not isinstance(doc, dict) or not isinstance(doc.get("slides"), list):
        raise FormatError("manifest needs a 'slides' list", None, path)
    if doc.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {doc.get('version')}", None, path)
    for i, s in enumerate(doc["slides"]):
        if not isinstance(s, dict) or not {"patient", "file"} <= set(s):
            raise FormatError(f"slide entry {i} needs 'patient' and 'file'", None, path)
    return doc, doc["slides"]


def read_clinical(path) -> CohortTable:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("clinical table is empty", 0, path) from None
        if PATIENT_COLUMN not in header:
            raise FormatError(f"clinical table has no {PATIENT_COLUMN} column", 0, path)
        rows, lines = [], []
        for r in reader:
            if r:
                rows.append(r)
                lines.append(reader.line_num)
    pidx = header.index(PATIENT_COLUMN)
    patients = [r[pidx].strip() for r in rows]
    dup = sorted({p for p in patients if patients.count(p) > 1})
    if dup:
        raise CohortError(f"duplicate patients in clinical table: {dup}")
    columns, text = {}, {}
    for j, name in enumerate(header):
        if j == pidx:
            continue
        values = []
        for line, r in zip(lines, rows):
            cell = r[j].strip() if j < len(r) else ""
            try:
                values.append(float(cell) if cell else math.nan)
            except ValueError:
                values.append(math.nan)
                text.setdefault(name, []).append((line, cell))
        columns[name] = np.array(values)
    return CohortTable(patients, columns, text)


def join_cohort(bags: list[FeatureBag], table: CohortTable, target: str, aux=()) -> Cohort:
    """Inner join of bags and targets.

    Patients lacking features, the main label or any requested aux value are
    dropped and listed in ``Cohort.exclusions``. Bag order is preserved.
    """
    aux = list(aux)
    for col in [target] + aux:
        if col not in table.columns:
            raise ConfigError(f"unknown target column {col!r}; available: {sorted(table.columns)}")
        if table.text_cells.get(col):
            line, cell = table.text_cells[col][0]
            raise CohortError(f"column {col!r} has non-numeric value {cell!r} on line {line}")
    ids = [b.patient_id for b in bags]
    dup = sorted({p for p in ids if ids.count(p) > 1})
    if dup:
        raise CohortError(f"duplicate patients in feature manifest: {dup}")
    row = {p: i for i, p in enumerate(table.patients)}
    exclusions: dict[str, str] = {}
    kept, ys, auxs = [], [], []
    for bag in bags:
        i = row.get(bag.patient_id)
        if i is None:
            exclusions[bag.patient_id] = "no clinical record"
            continue
        y = table.columns[target][i]
        if math.isnan(y):
            exclusions[bag.patient_id] = f"missing {target}"
            continue
        if y not in (0.0, 1.0):
            raise CohortError(f"main label {target!r} must be 0/1, patient {bag.patient_id} has {y}")
        a = [table.columns[c][i] for c in aux]
        missing = [c for c, v in zip(aux, a) if math.isnan(v)]
        if missing:
            exclusions[bag.patient_id] = f"missing {', '.join(missing)}"
            continue
        kept.append(bag)
        ys.append(int(y))
        auxs.append(a)
    have = set(ids)
    for p in table.patients:
        if p not in have:
            exclusions[p] = "no features"
    if not kept:
        raise CohortError("no patient has both features and the requested labels")
    return Cohort(
        bags=kept,
        y=np.array(ys, dtype=np.int64),
        aux=np.array(auxs, dtype=np.float64).reshape(len(kept), len(aux)),
        target=target,
        aux_names=aux,
        exclusions=dict(sorted(exclusions.items())),
    )


def load_cohort(manifest, clinical, target: str, aux=()) -> Cohort:
    manifest = Path(manifest)
    doc, slides = read_manifest(manifest)
    dim = doc.get("dim")
    bags = []
    for s in slides:
        bag = read_features(manifest.parent / s["file"], str(s["patient"]))
        if "n" in s and int(s["n"]) != bag.n:
            raise FormatError(f"manifest says n={s['n']} for {s['patient']} but file has {bag.n}", 8, s["file"])
        if dim is not None and bag.dim != int(dim):
            raise FormatError(f"manifest dim={dim} but {s['file']} has d={bag.dim}", 12, s["file"])
        bags.append(bag)
    return join_cohort(bags, read_clinical(clinical), target, aux)


# --------------------------------------------------------------- synthetic
@dataclass(frozen=True)
class SynthSpec:
    n_patients: int = 200
    dim: int = 32
    bag_min: int = 16
    bag_max: int = 64
    signal_dim: int = 4
    signal_shift: float = 1.0
    threshold: float = 0.5
    flip_noise: float = 0.1
    aux_corr: float = 0.8
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.n_patients < 2 or self.dim < 1:
            raise ConfigError("need >= 2 patients and dim >= 1")
        if not 1 <= self.bag_min <= self.bag_max:
            raise ConfigError(f"need 1 <= bag_min <= bag_max, got {self.bag_min}, {self.bag_max}")
        if not 1 <= self.signal_dim <= self.dim:
            raise ConfigError(f"signal_dim must be in [1, dim], got {self.signal_dim}")
        if abs(self.aux_corr) > 1:
            raise ConfigError(f"|aux_corr| must be <= 1, got {self.aux_corr}")
        if not 0 <= self.flip_noise <= 1 or not 0 <= self.threshold <= 1:
            raise ConfigError("flip_noise and threshold must lie in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def synth_cohort(spec: SynthSpec) -> tuple[list[FeatureBag], CohortTable]:
    """Bags of N(0, I) background patches mixed with shifted signal patches.

    Per patient a signal fraction f ~ U(0, 1) sets the share of signal
    patches; the label is 1{f > threshold}, flipped with probability
    ``flip_noise``; the aux target is ``rho * z(f) + sqrt(1 - rho^2) * N(0, 1)``
    with z the cohort standardization. Table columns: ``label``, ``aux``,
    ``signal_fraction``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.signal_dim)))
    direction = basis @ rng.normal(size=spec.signal_dim)
    mean_shift = spec.signal_shift * direction / np.linalg.norm(direction)

    n = spec.n_patients
    width = len(str(n - 1))
    patients = [f"P{i:0{width}d}" for i in range(n)]
    fraction = rng.uniform(0.0, 1.0, size=n)
    sizes = rng.integers(spec.bag_min, spec.bag_max + 1, size=n)
    bags = []
    for pid, f, size in zip(patients, fraction, sizes):
        x = rng.normal(size=(size, spec.dim))
        n_signal = int(round(f * size))
        x[:n_signal] += mean_shift
        bags.append(FeatureBag(pid, x[rng.permutation(size)]))

    labels = (fraction > spec.threshold).astype(np.float64)
    flip = rng.uniform(size=n) < spec.flip_noise
    labels[flip] = 1.0 - labels[flip]
    z = (fraction - fraction.mean()) / fraction.std()
    rho = spec.aux_corr
    aux = rho * z + math.sqrt(max(1.0 - rho * rho, 0.0)) * rng.normal(size=n)
    table = CohortTable(patients, {"label": labels, "aux": aux, "signal_fraction": fraction})
    return bags, table


def _fmt(v: float) -> str:
    if math.isnan(v):
        return ""
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def write_cohort(bags: list[FeatureBag], table: CohortTable, out_dir, feature_dir: str = "features") -> Path:
    """Write MTLF files, ``manifest.json`` and ``clinical.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / feature_dir).mkdir(parents=True, exist_ok=True)
    slides = []
    for bag in bags:
        rel = f"{feature_dir}/{bag.patient_id}.mtlf"
        write_features(bag, out / rel)
        slides.append({"patient": bag.patient_id, "file": rel, "n": bag.n})
    dims = {b.dim for b in bags}
    manifest = {"version": MANIFEST_VERSION, "dim": dims.pop() if len(dims) == 1 else None, "slides": slides}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    cols = list(table.columns)
    with open(out / "clinical.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([PATIENT_COLUMN] + cols)
        for i, p in enumerate(table.patients):
            w.writerow([p] + [_fmt(table.columns[c][i]) for c in cols])
    return out / "manifest.json"
