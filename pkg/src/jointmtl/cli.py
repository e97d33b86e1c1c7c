"""Command-line interface: ``jointmtl <command> [options]``.

Exit codes: 0 success, 1 runtime or data error, 2 usage or configuration
error. Files are written only below ``--out``.

An experiment config is a JSON object::

    {
      "data": {"manifest": "cohort/manifest.json", "clinical": "cohort/clinical.csv"},
      "synth": {...},              # instead of "data": generate in memory
      "model": {...}, "train": {...},
      "balancer": "naive",          # or "baseline", or a list of names
      "balancer_params": {...},
      "target": "label", "aux": ["aux"], "seed": 0
    }

Relative paths resolve against the config file's directory. Command-line
flags override file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .balancing import BALANCER_NAMES, BalancerSpec
from .crossval import BASELINE, run_crossval, run_sweep, write_summary
from .data import SynthSpec, join_cohort, load_cohort, synth_cohort, write_cohort
from .estimator import JointMTLClassifier
from .exceptions import ConfigError, JointMTLError
from .metrics import auprc, auroc, silhouette
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .plotting import plot_embeddings, read_embeddings
from .training import TrainConfig

EXPERIMENT_KEYS = {"data", "synth", "model", "train", "balancer", "balancer_params", "target", "aux", "seed"}


# ----------------------------------------------------------------- config
def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _columns(text: str) -> list[str]:
    return [c.strip() for c in text.split(",") if c.strip()]


def experiment_config(args) -> dict:
    """Merge the config file with command-line overrides."""
    doc = read_json(args.config) if args.config else {}
    unknown = sorted(set(doc) - EXPERIMENT_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; expected some of {sorted(EXPERIMENT_KEYS)}")
    base = Path(args.config).resolve().parent if args.config else Path.cwd()
    cfg = dict(doc)
    if "data" in cfg:
        cfg["data"] = {k: str((base / v).resolve()) for k, v in cfg["data"].items()}
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "balancer", None) is not None:
        cfg["balancer"] = args.balancer
    if getattr(args, "aux", None) is not None:
        cfg["aux"] = args.aux
    if getattr(args, "target", None) is not None:
        cfg["target"] = args.target
    cfg.setdefault("seed", 0)
    cfg.setdefault("target", "label")
    cfg.setdefault("aux", [])
    if isinstance(cfg["aux"], str):
        cfg["aux"] = _columns(cfg["aux"])
    if "data" not in cfg and "synth" not in cfg:
        raise ConfigError("config needs a 'data' section (manifest, clinical) or a 'synth' section")
    return cfg


def build_cohort(cfg: dict, aux):
    if "data" in cfg:
        d = cfg["data"]
        if "manifest" not in d or "clinical" not in d:
            raise ConfigError("'data' needs 'manifest' and 'clinical' paths")
        return load_cohort(d["manifest"], d["clinical"], cfg["target"], aux)
    spec = SynthSpec.from_dict({**cfg["synth"], "seed": cfg["synth"].get("seed", cfg["seed"])}).validate()
    bags, table = synth_cohort(spec)
    return join_cohort(bags, table, cfg["target"], aux)


def model_train_configs(cfg: dict) -> tuple[ModelConfig, TrainConfig]:
    model = ModelConfig.from_dict(cfg.get("model", {}))
    train = TrainConfig.from_dict(cfg.get("train", {})).validate()
    return model, train


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------- commands
def cmd_synth(args) -> int:
    doc = read_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SynthSpec.from_dict(doc).validate()
    bags, table = synth_cohort(spec)
    manifest = write_cohort(bags, table, args.out)
    _write(Path(args.out), "synth.json", _dump(spec.to_dict()))
    _log(f"wrote {len(bags)} bags and {manifest}")
    return 0


def cmd_crossval(args) -> int:
    cfg = experiment_config(args)
    model, train = model_train_configs(cfg)
    out = Path(args.out)
    hyper = cfg.get("balancer_params") or {}
    seed = cfg["seed"]
    if args.all_balancers:
        if not cfg["aux"]:
            raise ConfigError("--all-balancers needs at least one --aux target")
        cohort = build_cohort(cfg, cfg["aux"])
        names = [BASELINE] + list(BALANCER_NAMES)

        def progress(name, rep):
            _log(f"{name}: auroc={rep.means['auroc']:.4f} auprc={rep.means['auprc']:.4f}")
            rep.write(out / name.replace("+", "_"))

        plan, reports = run_sweep(cohort, model, train, names, seed, hyper, progress)
        _write(out, "plan.json", _dump({"hash": plan.digest(), **plan.to_dict()}))
        _write(out, "config.json", _dump(cfg))
        write_summary(reports, out / "summary.csv")
        return 0

    name = cfg.get("balancer", "naive")
    if not isinstance(name, str):
        raise ConfigError("'balancer' must be a single name; use --all-balancers for a sweep")
    if name == BASELINE:
        if cfg["aux"]:
            raise ConfigError("the baseline trains the main task only; drop the aux targets")
        spec = None
    else:
        spec = BalancerSpec.from_name(name, **hyper)
        if not cfg["aux"]:
            raise ConfigError(f"balancer {name!r} needs at least one --aux target")
    cohort = build_cohort(cfg, cfg["aux"])
    if cohort.exclusions:
        _log(f"excluded {len(cohort.exclusions)} patients")
    rep = run_crossval(cohort, model, train, spec, seed=seed)
    rep.config["exclusions"] = cohort.exclusions
    rep.write(out)
    _write(out, "config.json", _dump(cfg))
    _log(f"{rep.balancer}: auroc={rep.means['auroc']:.4f} auprc={rep.means['auprc']:.4f} ss={rep.means['silhouette']:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = experiment_config(args)
    model, train = model_train_configs(cfg)
    name = cfg.get("balancer", "naive")
    spec = None if name == BASELINE or not cfg["aux"] else BalancerSpec.from_name(name, **(cfg.get("balancer_params") or {}))
    if name == BASELINE and cfg["aux"]:
        raise ConfigError("the baseline trains the main task only; drop the aux targets")
    cohort = build_cohort(cfg, cfg["aux"])
    est = JointMTLClassifier.from_configs(replace(model, input_dim=cohort.dim), train, spec, random_state=cfg["seed"])
    est.fit(cohort.features(), cohort.y, cohort.aux if cfg["aux"] else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(est.params_, out / "model.mtlp")
    meta = {
        "config": cfg,
        "aux": cohort.aux_names,
        "aux_mean": est.aux_mean_.tolist(),
        "aux_std": est.aux_std_.tolist(),
        "history": est.history_.to_dict(),
    }
    _write(out, "train.json", _dump(meta))
    _log(f"trained {est.history_.epochs_run} epochs, best epoch {est.history_.best_epoch}")
    return 0


def _load_for_eval(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    cfg = experiment_config(args)
    try:
        params = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from exc
    cohort = build_cohort(cfg, [])
    return cfg, JointMTLClassifier.from_params(params), cohort


def cmd_evaluate(args) -> int:
    cfg, est, cohort = _load_for_eval(args)
    X = cohort.features()
    scores = est.predict_proba(X)[:, 1]
    emb = est.transform(X)
    metrics = {"auroc": auroc(scores, cohort.y), "auprc": auprc(scores, cohort.y), "silhouette": silhouette(emb, cohort.y)}
    out = Path(args.out)
    _write(out, "metrics.json", _dump({"config": cfg, "n": len(cohort), **metrics}))
    lines = ["patient,score,label"] + [f"{p},{float(s)!r},{int(y)}" for p, s, y in zip(cohort.patients, scores, cohort.y)]
    _write(out, "predictions.csv", "\n".join(lines) + "\n")
    _log(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return 0


def cmd_embed(args) -> int:
    _, est, cohort = _load_for_eval(args)
    emb = est.transform(cohort.features())
    header = "patient,label," + ",".join(f"e{i}" for i in range(emb.shape[1]))
    rows = [f"{p},{int(y)}," + ",".join(repr(float(v)) for v in e) for p, y, e in zip(cohort.patients, cohort.y, emb)]
    _write(Path(args.out), "embeddings.csv", "\n".join([header] + rows) + "\n")
    return 0


def cmd_plot(args) -> int:
    if not args.embeddings:
        raise ConfigError("--embeddings is required")
    _, labels, x = read_embeddings(args.embeddings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, ss = plot_embeddings(x, labels, out / "embeddings.svg")
    _log(f"silhouette of the 2-D projection: {'n/a' if ss is None else f'{ss:.4f}'}")
    return 0


# ----------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointmtl", description="Joint multi-task bag classifier with task balancing.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, balancer=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=_seed, help="seed (unsigned 64-bit)")
        sp.add_argument("--out", required=True, help="output directory")
        if balancer:
            sp.add_argument("--balancer", help="balancer name, e.g. naive, uncert+pcgrad, baseline")
            sp.add_argument("--aux", type=_columns, help="auxiliary target columns, comma separated")
            sp.add_argument("--target", help="main binary target column")

    sp = sub.add_parser("synth", help="generate a synthetic cohort")
    common(sp, balancer=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("crossval", help="k-fold cross-validation")
    common(sp)
    sp.add_argument("--all-balancers", action="store_true", help="baseline plus all 16 balancers on one fold plan")
    sp.set_defaults(func=cmd_crossval)

    sp = sub.add_parser("train", help="train on the whole cohort and save a checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_train)

    for name, func, text in (("evaluate", cmd_evaluate, "score a checkpoint"), ("embed", cmd_embed, "export embeddings")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--checkpoint", help="model.mtlp from the train command")
        sp.set_defaults(func=func)

    sp = sub.add_parser("plot", help="PCA scatter of an embeddings CSV")
    sp.add_argument("--embeddings", help="patient,label,e0.. CSV")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (JointMTLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
