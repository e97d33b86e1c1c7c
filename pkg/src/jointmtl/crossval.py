"""K-fold cross-validation runs, reports and balancer sweeps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .balancing import BALANCER_NAMES, BalancerSpec
from .data import Cohort
from .exceptions import CohortError
from .metrics import auprc, auroc, silhouette
from .model import ModelConfig, forward
from .training import FoldPlan, TrainConfig, derive_seed, fit_model, kfold_split

__all__ = ["RunReport", "run_crossval", "run_sweep", "BASELINE", "summary_rows", "write_summary"]

BASELINE = "baseline"


@dataclass
class RunReport:
    """Per-fold metrics, curves, test predictions and embeddings of one run."""

    balancer: str
    config: dict
    plan_hash: str
    folds: list[dict] = field(default_factory=list)
    predictions: list[tuple[str, int, float, int]] = field(default_factory=list)
    embeddings: list[tuple[str, int, np.ndarray]] = field(default_factory=list)

    def metric(self, name: str) -> list[float]:
        return [f[name] for f in self.folds]

    @property
    def means(self) -> dict[str, float]:
        return {k: float(np.mean(self.metric(k))) for k in ("auroc", "auprc", "silhouette")}

    def to_dict(self) -> dict:
        return {
            "balancer": self.balancer,
            "config": self.config,
            "plan_hash": self.plan_hash,
            "folds": self.folds,
            "mean": self.means,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient", "fold", "score", "label"])
        for p, f, s, y in self.predictions:
            w.writerow([p, f, repr(float(s)), y])
        return buf.getvalue()

    def embeddings_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        dim = len(self.embeddings[0][2]) if self.embeddings else 0
        w.writerow(["patient", "label"] + [f"e{i}" for i in range(dim)])
        for p, y, e in self.embeddings:
            w.writerow([p, y] + [repr(float(v)) for v in e])
        return buf.getvalue()

    def write(self, out_dir, prefix: str = "") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": out / f"{prefix}report.json",
            "predictions": out / f"{prefix}predictions.csv",
            "embeddings": out / f"{prefix}embeddings.csv",
        }
        paths["report"].write_text(self.to_json())
        paths["predictions"].write_text(self.predictions_csv())
        paths["embeddings"].write_text(self.embeddings_csv())
        return paths


def _check_labels(cohort: Cohort, joint: bool) -> None:
    y = np.asarray(cohort.y, dtype=np.float64)
    bad = [p for p, v in zip(cohort.patients, y) if not np.isfinite(v) or v not in (0.0, 1.0)]
    if bad:
        raise CohortError(f"patients without a valid main label: {bad}")
    if joint:
        if cohort.aux.shape[1] == 0:
            raise CohortError("a joint run needs at least one auxiliary target")
        bad = [p for p, row in zip(cohort.patients, cohort.aux) if not np.isfinite(row).all()]
        if bad:
            raise CohortError(f"patients without auxiliary labels: {bad}")


def run_crossval(
    cohort: Cohort,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    balancer: BalancerSpec | str | None,
    plan: FoldPlan | None = None,
    seed: int = 0,
) -> RunReport:
    """Train and test one model per fold of ``plan``.

    ``balancer=None`` is the single-task baseline: auxiliary targets are
    ignored and no balancing happens. Fold ``k`` initializes and shuffles from
    seeds derived from ``(seed, k)`` alone, so every balancer compared on the
    same plan starts from the same shared weights and sees the same bag order.
    """
    if isinstance(balancer, str):
        balancer = None if balancer == BASELINE else BalancerSpec.from_name(balancer)
    joint = balancer is not None
    _check_labels(cohort, joint)
    train_cfg.validate()
    if plan is None:
        plan = kfold_split(cohort.patients, cohort.y, train_cfg.folds, seed, train_cfg.monitor_fraction)
    index = {p: i for i, p in enumerate(cohort.patients)}
    missing = sorted({p for f in plan.folds for p in f.train + f.monitor + f.test} - set(index))
    if missing:
        raise CohortError(f"fold plan lists patients absent from the cohort: {missing}")
    n_aux = cohort.aux.shape[1] if joint else 0
    cfg = replace(model_cfg, input_dim=cohort.dim, n_aux=n_aux).validate()
    name = balancer.name if joint else BASELINE
    report = RunReport(
        balancer=name,
        config={
            "model": cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "balancer": None if not joint else {k: v for k, v in balancer.__dict__.items()},
            "target": cohort.target,
            "aux": list(cohort.aux_names) if joint else [],
            "seed": int(seed),
        },
        plan_hash=plan.digest(),
    )
    X = cohort.features()
    for k, fold in enumerate(plan.folds):
        tr = [index[p] for p in fold.train]
        mo = [index[p] for p in fold.monitor]
        te = [index[p] for p in fold.test]
        aux = cohort.aux[:, :n_aux]
        mean = aux[tr].mean(axis=0)
        std = aux[tr].std(axis=0)
        std = np.where(std > 0, std, 1.0)
        z = (aux - mean) / std
        fold_seed = derive_seed(seed, k)
        fold_cfg = replace(cfg, seed=derive_seed(seed, k, 0))
        params, hist, _ = fit_model(
            fold_cfg,
            train_cfg,
            balancer,
            ([X[i] for i in tr], cohort.y[tr], z[tr]),
            ([X[i] for i in mo], cohort.y[mo], z[mo]),
            seed=fold_seed,
        )
        outs = [forward(params, X[i]) for i in te]
        scores = np.array([o.probability() for o in outs])
        emb = np.stack([o.embedding.data for o in outs])
        labels = cohort.y[te]
        report.folds.append(
            {
                "fold": k,
                "auroc": auroc(scores, labels),
                "auprc": auprc(scores, labels),
                "silhouette": silhouette(emb, labels),
                "n_train": len(tr),
                "n_monitor": len(mo),
                "n_test": len(te),
                "aux_mean": [float(v) for v in mean],
                "aux_std": [float(v) for v in std],
                **hist.to_dict(),
            }
        )
        for i, s, e in zip(te, scores, emb):
            report.predictions.append((cohort.patients[i], k, float(s), int(cohort.y[i])))
            report.embeddings.append((cohort.patients[i], int(cohort.y[i]), e))
    return report


def run_sweep(
    cohort: Cohort,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    names=None,
    seed: int = 0,
    hyper: dict | None = None,
    progress=None,
) -> tuple[FoldPlan, dict[str, RunReport]]:
    """Baseline plus every named balancer on one shared fold plan."""
    names = [BASELINE] + list(BALANCER_NAMES) if names is None else list(names)
    plan = kfold_split(cohort.patients, cohort.y, train_cfg.folds, seed, train_cfg.monitor_fraction)
    reports = {}
    for name in names:
        spec = None if name == BASELINE else BalancerSpec.from_name(name, **(hyper or {}))
        reports[name] = run_crossval(cohort, model_cfg, train_cfg, spec, plan=plan, seed=seed)
        if progress is not None:
            progress(name, reports[name])
    return plan, reports


def summary_rows(reports: dict[str, RunReport]) -> list[dict]:
    rows = []
    for name, rep in reports.items():
        row = {"balancer": name}
        for m in ("auroc", "auprc", "silhouette"):
            vals = rep.metric(m)
            row[f"{m}_mean"] = float(np.mean(vals))
            row[f"{m}_std"] = float(np.std(vals))
        rows.append(row)
    return rows


def write_summary(reports: dict[str, RunReport], path) -> Path:
    rows = summary_rows(reports)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([r["balancer"]] + [repr(v) for k, v in r.items() if k != "balancer"])
    return path
