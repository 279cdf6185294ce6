"""Command-line entry point: generate, train, evaluate, importance, textualize, report.

Every command reads one JSON config (``--config``) with ``--set section.key=value``
overrides, writes the fully resolved config next to its outputs and exits with
0 on success, 2 on usage/config errors, 3 on data validation errors and 4 on
numerical/training failures.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .baselines import KnnDtwLearner, KnnLearner, LogisticLearner
from .cohort import (
    Cohort,
    CohortError,
    ConfigError,
    GeneratorConfig,
    filter_window,
    generate_synthetic_cohort,
    load_cohort_dir,
    save_cohort,
    schema_hash,
)
from .evaluation import (
    MetricError,
    PedCaLearner,
    SplitError,
    importance_csv,
    permutation_importance,
    rank_importance,
    run_cross_validation,
)
from .fusion import SchemaMismatchError, TrainConfig, load_checkpoint, save_checkpoint, train
from .numerics import NumericalError, TrainingError
from .textual import assemble_document

log = logging.getLogger("pedca")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODELS = ("pedca-ft", "tabular-only", "textual-only", "lr", "knn-unif", "knn-dtw")
_MODEL_MODE = {"pedca-ft": "fused", "tabular-only": "tabular-only", "textual-only": "textual-only"}
# set from the top-level keys, never inside the train section
_TRAIN_DERIVED = ("seed", "tau", "mode")


def default_config() -> dict:
    train_defaults = {k: v for k, v in TrainConfig().to_dict().items() if k not in _TRAIN_DERIVED}
    return {
        "seed": 0,
        "tau": 24.0,
        "k_folds": 5,
        "model": "pedca-ft",
        "generator": GeneratorConfig().to_dict(),
        "train": train_defaults,
        "baseline": {"k": 5, "band_radius": None, "l2": 0.01, "epochs": 1000, "lr": 0.1},
        "importance": {"n_shuffles": 5, "confidence": 0.95, "seed": 0},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    keys = dotted.strip().split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


def resolve_config(config_path: str | None, overrides: list[str]) -> dict:
    """Defaults, then the config file, then each ``--set`` in order; unknown keys raise ConfigError."""
    config = default_config()
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        config = _merge(config, loaded)
    for text in overrides:
        config = _merge(config, _parse_override(text))
    if config["model"] not in MODELS:
        raise ConfigError(f"unknown model {config['model']!r}; choose from {', '.join(MODELS)}")
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def train_config(config: dict, mode: str = "fused") -> TrainConfig:
    return TrainConfig.from_dict({**config["train"], "seed": config["seed"], "tau": config["tau"], "mode": mode})


def make_learner(config: dict):
    name = config["model"]
    b = config["baseline"]
    if name in _MODEL_MODE:
        return PedCaLearner(train_config(config, _MODEL_MODE[name]))
    if name == "lr":
        return LogisticLearner(l2=b["l2"], epochs=b["epochs"], lr=b["lr"], seed=config["seed"], tau=config["tau"])
    if name == "knn-unif":
        return KnnLearner(k=b["k"], tau=config["tau"])
    return KnnDtwLearner(k=b["k"], band_radius=b["band_radius"], tau=config["tau"])


# -- output helpers ----------------------------------------------------------------


def _prepare_out(out: Path, names: list[str], force: bool) -> None:
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise FileExistsError(f"{out}: {', '.join(existing)} already exist (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_run_metadata(out: Path, command: str, config: dict, inputs: dict[str, Path] | None = None) -> None:
    _write_json(out / "config.json", config)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": config["seed"],
        "config_sha256": config_hash(config),
        "inputs": {k: _file_digest(p) for k, p in sorted((inputs or {}).items())},
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    _write_json(out / "manifest.json", manifest)


def _cohort_inputs(cohort_dir: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(cohort_dir.iterdir()) if p.suffix in (".json", ".csv") and p.is_file()}


# -- commands -----------------------------------------------------------------------


def cmd_generate(config: dict, out: Path, force: bool = False) -> Cohort:
    gen = GeneratorConfig.from_dict(config["generator"])
    gen.validate()
    _prepare_out(out, ["schema.json", "static.csv", "temporal.csv"], force)
    cohort = generate_synthetic_cohort(gen, seed=config["seed"])
    save_cohort(cohort, out)
    _write_run_metadata(out, "generate", config)
    return cohort


def cmd_train(config: dict, cohort_dir: Path, out: Path, force: bool = False):
    cohort = load_cohort_dir(cohort_dir)
    mode = _MODEL_MODE.get(config["model"])
    if mode is None:
        raise ConfigError(f"train supports {', '.join(_MODEL_MODE)}; got {config['model']!r}")
    _prepare_out(out, ["model.json", "history.json"], force)
    model, history = train(list(cohort.records), cohort.schema, train_config(config, mode),
                           progress=lambda e, loss, _m: log.info("epoch %d loss %.6f", e, loss))
    save_checkpoint(model, out / "model.json")
    _write_json(out / "history.json", history)
    _write_run_metadata(out, "train", config, _cohort_inputs(cohort_dir))
    return model


def cmd_evaluate(config: dict, cohort_dir: Path, out: Path, force: bool = False):
    cohort = load_cohort_dir(cohort_dir)
    _prepare_out(out, ["report.json", "metrics.csv"], force)
    report = run_cross_validation(cohort, make_learner(config), k=config["k_folds"], seed=config["seed"])
    report.config = config
    _write_json(out / "report.json", report.to_json())
    (out / "metrics.csv").write_text(report.metrics_csv(), encoding="utf-8")
    _write_run_metadata(out, "evaluate", config, _cohort_inputs(cohort_dir))
    return report


def cmd_importance(config: dict, cohort_dir: Path, checkpoint: Path, out: Path, p_max: float | None = None,
                   top: int | None = None, force: bool = False):
    cohort = load_cohort_dir(cohort_dir)
    model = load_checkpoint(checkpoint, expected_schema_hash=schema_hash(cohort.schema))
    _prepare_out(out, ["importance.csv", "importance.json"], force)
    imp = config["importance"]
    rows = permutation_importance(model, list(cohort.records), n_shuffles=imp["n_shuffles"],
                                  confidence=imp["confidence"], seed=imp["seed"])
    rows = rank_importance(rows)
    if p_max is not None:
        rows = [r for r in rows if r.p_value <= p_max]
    if top is not None:
        rows = rows[:top]
    (out / "importance.csv").write_text(importance_csv(rows), encoding="utf-8")
    _write_json(out / "importance.json", [r.to_json() for r in rows])
    _write_run_metadata(out, "importance", config, {**_cohort_inputs(cohort_dir), "checkpoint": checkpoint})
    return rows


def cmd_textualize(config: dict, cohort_dir: Path, out: Path, force: bool = False) -> int:
    cohort = load_cohort_dir(cohort_dir)
    _prepare_out(out, ["documents.jsonl"], force)
    records = sorted(cohort.records, key=lambda r: r.admission_id)
    with open(out / "documents.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            doc = assemble_document(filter_window(r, config["tau"]), cohort.schema)
            fh.write(json.dumps({"admission_id": r.admission_id, "patient_id": r.patient_id, "text": doc}) + "\n")
    _write_run_metadata(out, "textualize", config, _cohort_inputs(cohort_dir))
    return len(records)


def render_report(report: dict) -> str:
    lines = [f"model: {report['model']}  folds: {report['k']}  seed: {report['seed']}", ""]
    lines.append(f"{'metric':<12} {'mean':>8} {'std':>8}")
    for name, agg in report["aggregate"].items():
        lines.append(f"{name:<12} {agg['mean']:>8.4f} {agg['std']:>8.4f}")
    lines.append("")
    lines.append(f"{'fold':<6} {'threshold':>10} {'auroc':>8} {'auprc':>8} {'bal_acc':>8}")
    for f in report["folds"]:
        m = f["metrics"]
        lines.append(f"{f['fold']:<6} {f['threshold']:>10.4g} {m['auroc']:>8.4f} {m['auprc']:>8.4f} {m['bal_acc']:>8.4f}")
    return "\n".join(lines)


def cmd_report(run_dir: Path) -> str:
    path = run_dir / "report.json" if run_dir.is_dir() else run_dir
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from exc
    return render_report(report)


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedca", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cohort=True, out=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        if cohort:
            p.add_argument("--cohort", required=True, type=Path, help="cohort directory")
        if out:
            p.add_argument("--out", required=True, type=Path, help="run output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    common(sub.add_parser("generate", help="write a synthetic cohort"), cohort=False)
    p = sub.add_parser("train", help="train PedCA-FT on a whole cohort and save a checkpoint")
    common(p)
    p.add_argument("--model", choices=list(_MODEL_MODE))
    p = sub.add_parser("evaluate", help="k-fold patient-disjoint cross-validation")
    common(p)
    p.add_argument("--model", help=f"one of: {', '.join(MODELS)}")
    p = sub.add_parser("importance", help="permutation importance of a checkpoint on a cohort")
    common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--p-max", type=float, help="keep rows with p_value <= P")
    p.add_argument("--top", type=int, help="keep the N most important rows")
    common(sub.add_parser("textualize", help="write one document per admission"))
    p = sub.add_parser("report", help="render a report.json as a table")
    p.add_argument("run", type=Path, help="run directory or report.json")
    return parser


def _run(args) -> int:
    if args.command == "report":
        print(cmd_report(args.run))
        return EXIT_OK
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "model", None):
        overrides.append(f"model={args.model}")
    config = resolve_config(args.config, overrides)
    if args.command == "generate":
        cmd_generate(config, args.out, args.force)
    elif args.command == "train":
        cmd_train(config, args.cohort, args.out, args.force)
    elif args.command == "evaluate":
        report = cmd_evaluate(config, args.cohort, args.out, args.force)
        print(render_report(report.to_json()))
    elif args.command == "importance":
        rows = cmd_importance(config, args.cohort, args.checkpoint, args.out, args.p_max, args.top, args.force)
        for r in rows[:20]:
            print(f"{r.feature:<30} {r.mean:>9.4f}  p={r.p_value:.3g}")
    elif args.command == "textualize":
        cmd_textualize(config, args.cohort, args.out, args.force)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (ConfigError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CohortError, SplitError, SchemaMismatchError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingError, MetricError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
