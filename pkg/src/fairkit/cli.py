"""Command-line entry points and configuration management.

Flag precedence: command line > YAML (--conf_file) > defaults. The resolved
config is echoed to opt.yaml inside each run directory, and reloading that
file reproduces the run exactly.

Exit codes: 0 success, 2 config error, 3 IO error, 4 training diverged,
5 analysis found no usable runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import analysis, data, postproc, training
from .errors import (
    ConfigError,
    EmptyInputError,
    FairkitError,
    IOErrorWithStage,
    TrainingDivergedError,
)
from .evaluation import evaluate_predictions

TOOLKIT_VERSION = "0.1.0"

BTOBJ_TO_OBJECTIVE = {"joint": "joint", "y": "y", "g": "g", "EO": "eo"}


@dataclass
class TrainConfig:
    dataset: str = "synthetic"
    dataset_format: str = "jsonl"
    emb_size: int = 0
    num_classes: int = 0
    num_groups: int = 0
    encoder_architecture: str = "vector"
    BT: str | None = None
    BTObj: str | None = None
    adv_debiasing: bool = False
    INLP: bool = False
    gate_soft: bool = False
    method: str = "Standard"
    adv_lambda: float = 1.0
    n_discriminators: int = 1
    diff_lambda: float = 0.0
    fairbatch_alpha: float = 0.0
    fcl_lambda_y: float = 0.0
    fcl_lambda_g: float = 0.0
    eo_cla_lambda: float = 0.0
    inlp_iterations: int = 10
    gate_grid_resolution: int = 11
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    hidden_dims: list[int] = field(default_factory=lambda: [16])
    activation: str = "relu"
    temperature: float = 0.07
    seed: int = 0
    results_dir: str = "results"
    data_dir: str = "data"
    synthetic_spec: str | None = None
    conf_file: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("conf_file")
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairkit", add_help=True)
    p.add_argument("--dataset", type=str)
    p.add_argument("--dataset_format", type=str, choices=["csv", "jsonl"])
    p.add_argument("--emb_size", type=int)
    p.add_argument("--num_classes", type=int)
    p.add_argument("--num_groups", type=int)
    p.add_argument("--encoder_architecture", type=str)
    p.add_argument("--BT", type=str, choices=list(data.MODES))
    p.add_argument("--BTObj", type=str, choices=list(BTOBJ_TO_OBJECTIVE))
    p.add_argument("--adv_debiasing", action="store_const", const=True)
    p.add_argument("--INLP", action="store_const", const=True)
    p.add_argument("--gate_soft", action="store_const", const=True)
    p.add_argument("--method", type=str, choices=list(training.METHODS))
    p.add_argument("--adv_lambda", type=float)
    p.add_argument("--n_discriminators", type=int)
    p.add_argument("--diff_lambda", type=float)
    p.add_argument("--fairbatch_alpha", type=float)
    p.add_argument("--fcl_lambda_y", type=float)
    p.add_argument("--fcl_lambda_g", type=float)
    p.add_argument("--eo_cla_lambda", type=float)
    p.add_argument("--inlp_iterations", type=int)
    p.add_argument("--gate_grid_resolution", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", type=str, choices=["sgd", "adam"])
    p.add_argument("--hidden_dims", type=int, nargs="+")
    p.add_argument("--activation", type=str, choices=["relu", "tanh"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--results_dir", type=str)
    p.add_argument("--data_dir", type=str)
    p.add_argument("--synthetic_spec", type=str)
    p.add_argument("--conf_file", type=str)
    return p


def parse_config(argv: list[str]) -> TrainConfig:
    """defaults < YAML (--conf_file) < command-line flags."""
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        if e.code == 0:  # --help
            raise
        raise ConfigError(f"could not parse arguments: {argv}") from None
    cfg = TrainConfig()
    if ns.conf_file is not None:
        path = Path(ns.conf_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        for key, value in raw.items():
            if key not in _CONFIG_FIELDS or key == "conf_file":
                raise ConfigError(f"unknown config key {key!r} in {path}")
            setattr(cfg, key, _coerce(key, value))
        cfg.conf_file = str(path)
    for key in _CONFIG_FIELDS:
        if key == "conf_file":
            continue
        value = getattr(ns, key, None)
        if value is not None:
            setattr(cfg, key, _coerce(key, value))
    _validate(cfg)
    return cfg


def _coerce(key: str, value):
    if value is None:
        return None
    kind = _CONFIG_FIELDS[key].type
    try:
        if key == "hidden_dims":
            return [int(v) for v in value]
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            raise ValueError("expected a boolean")
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: expected {kind}, got {value!r}") from None


def _validate(cfg: TrainConfig):
    if cfg.encoder_architecture != "vector":
        raise ConfigError(
            f"encoder_architecture {cfg.encoder_architecture!r} is not supported; "
            "this toolkit consumes precomputed fixed-dimension vectors (use 'vector')")
    if cfg.BTObj is not None and cfg.BT is None:
        raise ConfigError("--BTObj requires --BT (objective given without a mode)")
    if cfg.BT is not None and cfg.BTObj is None:
        raise ConfigError("--BT requires --BTObj (mode given without an objective)")
    if cfg.method not in training.METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}")


def effective_method(cfg: TrainConfig) -> str:
    if cfg.adv_debiasing and cfg.method == "Standard":
        return "Adv"
    return cfg.method


def method_index(cfg: TrainConfig) -> dict:
    """Trade-off hyperparameter index identifying a sweep point."""
    m = effective_method(cfg)
    index: dict[str, float] = {}
    if m in ("Adv", "EAdv", "AAdv"):
        index["adv_lambda"] = cfg.adv_lambda
    elif m in ("DAdv", "ADAdv"):
        index["adv_lambda"] = cfg.adv_lambda
        index["diff_lambda"] = cfg.diff_lambda
    elif m == "FairBatch":
        index["fairbatch_alpha"] = cfg.fairbatch_alpha
    elif m == "FairSCL":
        index["fcl_lambda_y"] = cfg.fcl_lambda_y
        index["fcl_lambda_g"] = cfg.fcl_lambda_g
    elif m == "EO_CLA":
        index["eo_cla_lambda"] = cfg.eo_cla_lambda
    if cfg.INLP:
        index["inlp_iterations"] = cfg.inlp_iterations
    return index


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(cfg.to_yaml().encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Dataset resolution

def default_synthetic_spec(cfg: TrainConfig) -> data.SyntheticSpec:
    """Biased default: majority cells where the group index matches the
    class (mod num_groups), moderate group leakage."""
    nc = max(2, cfg.num_classes)
    ng = max(2, cfg.num_groups)
    cells = {(c, g): (300 if g == c % ng else 100) for c in range(nc) for g in range(ng)}
    return data.SyntheticSpec(n_per_cell=cells, d=cfg.emb_size or 8,
                              class_separation=1.5, group_shift=2.5,
                              noise_sigma=1.0, seed=cfg.seed)


def resolve_datasets(cfg: TrainConfig) -> tuple[data.Dataset, data.Dataset, data.Dataset]:
    if cfg.dataset == "synthetic":
        if cfg.synthetic_spec:
            path = Path(cfg.synthetic_spec)
            if not path.exists():
                raise IOErrorWithStage(f"synthetic spec not found: {path}")
            spec = data.synthetic_spec_from_dict(yaml.safe_load(path.read_text()))
        else:
            spec = default_synthetic_spec(cfg)
        if cfg.emb_size and spec.d != cfg.emb_size:
            raise ConfigError(f"--emb_size {cfg.emb_size} does not match synthetic d={spec.d}")
        return data.generate_synthetic(spec)
    splits = []
    for split in ("train", "dev", "test"):
        path = Path(cfg.data_dir) / f"{cfg.dataset}_{split}.{cfg.dataset_format}"
        if not path.exists():
            raise IOErrorWithStage(f"dataset file not found: {path}")
        splits.append(data.load_dataset(path, cfg.dataset_format, split=split,
                                        num_classes=cfg.num_classes,
                                        num_groups=cfg.num_groups))
    train_ds, dev_ds, test_ds = splits
    if cfg.emb_size and train_ds.dim != cfg.emb_size:
        raise ConfigError(f"--emb_size {cfg.emb_size} does not match data dim {train_ds.dim}")
    return train_ds, dev_ds, test_ds


# ---------------------------------------------------------------------------
# Commands

def cmd_train(cfg: TrainConfig) -> int:
    bundle = resolve_datasets(cfg)
    train_ds, dev_ds, test_ds = bundle

    run_dir = Path(cfg.results_dir) / config_hash(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "opt.yaml").write_text(cfg.to_yaml())

    stages = []
    if cfg.BT is not None:
        stages.append(f"pre:{cfg.BTObj}-{cfg.BT.lower()}")
    method = effective_method(cfg)
    stages.append(f"at:{method}")
    if cfg.INLP:
        stages.append("post:INLP")
    if cfg.gate_soft and method == "Gate":
        stages.append("post:Gate-soft")

    manifest = {
        "version": TOOLKIT_VERSION,
        "method": method,
        "index": method_index(cfg),
        "seed": cfg.seed,
        "stages": stages,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "finalized": False,
    }
    manifest_path = run_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))

    if cfg.BT is not None:
        train_ds = data.balance(train_ds, BTOBJ_TO_OBJECTIVE[cfg.BTObj], cfg.BT,
                                seed=cfg.seed)

    mcfg = training.MethodConfig(
        method=method, adv_lambda=cfg.adv_lambda,
        n_discriminators=cfg.n_discriminators, diff_lambda=cfg.diff_lambda,
        fairbatch_alpha=cfg.fairbatch_alpha, fcl_lambda_y=cfg.fcl_lambda_y,
        fcl_lambda_g=cfg.fcl_lambda_g, eo_cla_lambda=cfg.eo_cla_lambda,
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
        lr=cfg.lr, optimizer=cfg.optimizer, hidden_dims=tuple(cfg.hidden_dims),
        activation=cfg.activation, temperature=cfg.temperature)
    record = training.train(train_ds, dev_ds, test_ds, mcfg, run_dir=run_dir)

    if cfg.INLP:
        run_inlp_stage(record, train_ds, dev_ds, test_ds, cfg, run_dir)
    if cfg.gate_soft and method == "Gate":
        run_gate_soft_stage(record, dev_ds, test_ds, cfg, run_dir)

    manifest["finalized"] = True
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest["files"] = sorted(str(p.relative_to(run_dir))
                               for p in run_dir.rglob("*") if p.is_file())
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return 0


def _select_model(record: training.RunRecord) -> object:
    """Checkpoint at the dev-DTO-best epoch, reloaded from disk."""
    best_epoch = analysis.select_epoch(record.rows, analysis.SelectionCriterion())
    row = next(r for r in record.rows if r["epoch"] == best_epoch)
    if row["checkpoint"]:
        model, _, _ = training.load_checkpoint(row["checkpoint"])
        return model
    return record.model


def run_inlp_stage(record, train_ds, dev_ds, test_ds, cfg: TrainConfig, run_dir: Path):
    model = _select_model(record)
    H_train = postproc.hidden_representations(model, train_ds.X)
    projection = postproc.inlp(H_train, train_ds.g, max_iterations=cfg.inlp_iterations)
    postproc.save_projection(run_dir / "inlp_projection.bin", projection)
    clf = postproc.apply_inlp_and_refit(model, projection.P, train_ds,
                                        num_classes=train_ds.num_classes)
    row = {"post": "INLP", "iterations": projection.iterations_applied,
           "probe_accuracies": projection.probe_accuracies}
    for name, ds in (("dev", dev_ds), ("test", test_ds)):
        report = evaluate_predictions(clf.predict(ds.X), ds.y, ds.g,
                                      ds.num_classes, ds.num_groups)
        row[f"{name}_performance"] = report.performance
        row[f"{name}_fairness"] = report.fairness
    with open(run_dir / "epochs.jsonl", "a") as f:
        f.write(json.dumps(row) + "\n")
    return clf, row


def run_gate_soft_stage(record, dev_ds, test_ds, cfg: TrainConfig, run_dir: Path):
    model = _select_model(record)
    prior, dev_dto = postproc.gate_soft_search(model, dev_ds,
                                               grid_resolution=cfg.gate_grid_resolution)
    p = list(prior.prior)
    row = {"post": "Gate-soft", "prior": p, "dev_dto": dev_dto}
    for name, ds in (("dev", dev_ds), ("test", test_ds)):
        import numpy as np
        preds = training.gate_soft_logits(model, ds.X, np.array(p)).argmax(axis=1)
        report = evaluate_predictions(preds, ds.y, ds.g, ds.num_classes, ds.num_groups)
        row[f"{name}_performance"] = report.performance
        row[f"{name}_fairness"] = report.fairness
    with open(run_dir / "epochs.jsonl", "a") as f:
        f.write(json.dumps(row) + "\n")
    return prior, row


def cmd_analyze(argv: list[str]) -> int:
    p = argparse.ArgumentParser(prog="fairkit analyze")
    p.add_argument("--results_dir", type=str, default="results")
    p.add_argument("--output_dir", type=str, default=None)
    p.add_argument("--selection_criterion", type=str, default="DTO",
                   choices=list(analysis.CRITERIA))
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--pareto_only", action="store_true")
    args = p.parse_args(argv)

    runs, skipped = analysis.load_runs(args.results_dir)
    if skipped:
        print(f"warning: skipped {skipped} unfinalized or empty run(s)", file=sys.stderr)
    criterion = analysis.SelectionCriterion(kind=args.selection_criterion,
                                            threshold=args.threshold)
    table, selection = analysis.analyze_runs(runs, criterion)

    out_dir = Path(args.output_dir or args.results_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fmt, ext in (("markdown", "md"), ("latex", "tex"), ("csv", "csv")):
        (out_dir / f"results_table.{ext}").write_text(analysis.emit_table(table, fmt))
    by_method: dict[str, list[dict]] = {}
    for r in runs:
        by_method.setdefault(r["method"], []).append(r)
    tradeoff = analysis.emit_tradeoff_data(by_method, pareto_only=args.pareto_only,
                                           criterion=criterion)
    (out_dir / "tradeoff.json").write_text(json.dumps(tradeoff, indent=2))
    (out_dir / "selection.json").write_text(json.dumps(selection, indent=2))
    print(analysis.emit_table(table, "markdown"))
    return 0


def cmd_generate(argv: list[str]) -> int:
    p = argparse.ArgumentParser(prog="fairkit generate")
    p.add_argument("--synthetic_spec", type=str, default=None)
    p.add_argument("--out_dir", type=str, required=True)
    p.add_argument("--name", type=str, default="synthetic")
    p.add_argument("--seed", type=int, default=None)
    args = p.parse_args(argv)

    if args.synthetic_spec:
        raw = yaml.safe_load(Path(args.synthetic_spec).read_text())
        if args.seed is not None:
            raw["seed"] = args.seed
        spec = data.synthetic_spec_from_dict(raw)
    else:
        cfg = TrainConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        spec = default_synthetic_spec(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = data.generate_synthetic(spec)
    for ds in bundle:
        data.save_jsonl(ds, out_dir / f"{args.name}_{ds.split}.jsonl")
    echo = {"d": spec.d, "class_separation": spec.class_separation,
            "group_shift": spec.group_shift, "noise_sigma": spec.noise_sigma,
            "seed": spec.seed,
            "n_per_cell": {f"{c},{g}": n for (c, g), n in sorted(spec.n_per_cell.items())}}
    (out_dir / f"{args.name}_spec.yaml").write_text(yaml.safe_dump(echo, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and argv[0] == "analyze":
            return cmd_analyze(argv[1:])
        if argv and argv[0] == "generate":
            return cmd_generate(argv[1:])
        if argv and argv[0] == "train":
            argv = argv[1:]
        return cmd_train(parse_config(argv))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (IOErrorWithStage, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 4
    except EmptyInputError as e:
        print(f"analysis error: {e}", file=sys.stderr)
        return 5
    except FairkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
