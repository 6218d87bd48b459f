"""Command-line front end.

Subcommands:
  preprocess  hash + similarity sidecars for one partitioned dataset
  train       train the requested methods, write models + manifest + CSVs
  evaluate    score a saved model against a libsvm file
  sweep       repeat training along one axis (theta or parties), write a table
  report      render PNG figures for a finished run directory

Datasets are named files resolved against --dataset as a path first, then the
directory in FEDBOOST_DATA (default ./data). All outputs are deterministic
for a fixed config and seeds: arrays as .npy sidecars, JSON with sorted keys,
no timestamps or absolute paths.

Exit codes: 0 success, 2 configuration error, 3 dataset parse error,
4 privacy gate violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from . import __version__
from .analysis import (
    PrivacyStatus,
    RoundErrorTracker,
    privacy_check,
    test_error,
)
from .dataset import (
    Dataset,
    LibsvmParseError,
    PartitionMode,
    PartitionSpec,
    parse_libsvm,
    partition,
    train_test_split,
)
from .federation import (
    CommLedger,
    Party,
    TrainingSchedule,
    _position_maps,
    preprocess,
    train_allin,
    train_simfl,
    train_solo,
    train_tfl,
)
from .gbdt import GbdtModel, GbdtParams, TrainMatrix
from .lsh import LshConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_PRIVACY = 4

KNOWN_METHODS = ("simfl", "solo", "allin", "tfl")


class ConfigError(ValueError):
    pass


class PrivacyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    dataset: str = "a9a"
    parties: int = 2
    theta: float = 0.8
    mode: str = "unbalanced"
    trees: int = 500
    depth: int = 8
    learning_rate: float = 0.1
    lam: float = 1.0
    gamma: float = 0.0
    lsh_r: float = 4.0
    lsh_l: Optional[int] = None  # default: min(40, d - 1) once d is known
    train_fraction: float = 0.75
    methods: tuple[str, ...] = KNOWN_METHODS
    schedule: str = "round_robin"
    seed_split: int = 0
    seed_partition: int = 1
    seed_lsh: int = 2
    seed_tie: int = 3
    out: str = "out"
    allow_insecure_lsh: bool = False
    delta: float = 0.05

    def validate(self) -> None:
        if self.mode not in ("balanced", "unbalanced"):
            raise ConfigError(f"mode must be balanced or unbalanced, got {self.mode!r}")
        if self.parties < 1:
            raise ConfigError("parties must be >= 1")
        if not (0.0 < self.theta < 1.0):
            raise ConfigError("theta must lie in (0, 1)")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.trees < 1:
            raise ConfigError("trees must be >= 1")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.lsh_r <= 0:
            raise ConfigError("lsh-r must be positive")
        if self.lsh_l is not None and self.lsh_l < 1:
            raise ConfigError("lsh-l must be >= 1")
        if not self.methods:
            raise ConfigError("at least one method must be requested")
        bad = [m for m in self.methods if m not in KNOWN_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; valid: {list(KNOWN_METHODS)}")
        if self.schedule not in ("round_robin", "contiguous"):
            raise ConfigError("schedule must be round_robin or contiguous")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("delta must lie in (0, 1)")

    def gbdt_params(self) -> GbdtParams:
        return GbdtParams(
            num_trees=self.trees,
            max_depth=self.depth,
            learning_rate=self.learning_rate,
            lam=self.lam,
            gamma=self.gamma,
        )

    def as_dict(self) -> dict:
        """Manifest echo: everything needed to re-run, minus the output
        location itself (manifests must not depend on where they live)."""
        d = dataclasses.asdict(self)
        d["methods"] = list(self.methods)
        del d["out"]
        return d


def _load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    values = dataclasses.asdict(RunConfig())
    field_names = set(values)

    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_values) - field_names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values.update(file_values)

    if getattr(args, "fast", None):
        values["trees"] = 100
    for name in field_names:
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            values[name] = flag_val

    if isinstance(values["methods"], str):
        values["methods"] = tuple(m.strip() for m in values["methods"].split(",") if m.strip())
    else:
        values["methods"] = tuple(values["methods"])
    values["allow_insecure_lsh"] = bool(values["allow_insecure_lsh"])

    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def resolve_dataset_path(name_or_path: str) -> Path:
    """Direct file path first, then a file of that name under FEDBOOST_DATA
    (default ./data)."""
    direct = Path(name_or_path)
    if direct.is_file():
        return direct
    root = Path(os.environ.get("FEDBOOST_DATA", "data"))
    candidate = root / name_or_path
    if candidate.is_file():
        return candidate
    raise ConfigError(
        f"dataset file missing: {name_or_path!r} is not a file and {candidate} does not "
        f"exist (set FEDBOOST_DATA or pass a path)"
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class PreparedRun:
    config: RunConfig
    dataset_name: str
    dimension: int
    num_tables: int
    parties: list[Party]
    train_set: Dataset
    X_test: sparse.csr_matrix
    y_test: np.ndarray


def prepare_run(cfg: RunConfig) -> PreparedRun:
    path = resolve_dataset_path(cfg.dataset)
    ds = parse_libsvm(path, name=Path(cfg.dataset).name)
    train_set, test_set = train_test_split(ds, cfg.train_fraction, cfg.seed_split)
    spec = PartitionSpec(
        mode=PartitionMode(cfg.mode),
        num_parties=cfg.parties,
        theta=cfg.theta,
        seed=cfg.seed_partition,
    )
    try:
        parts = partition(train_set, spec)
    except ValueError as exc:
        raise ConfigError(str(exc))
    parties = [Party.from_dataset(pd) for pd in parts]
    X_test, y_test, _ = test_set.to_arrays()
    num_tables = cfg.lsh_l if cfg.lsh_l is not None else max(1, min(40, ds.dimension - 1))
    return PreparedRun(
        config=cfg,
        dataset_name=ds.name,
        dimension=ds.dimension,
        num_tables=num_tables,
        parties=parties,
        train_set=train_set,
        X_test=X_test,
        y_test=y_test,
    )


def enforce_privacy_gate(prep: PreparedRun) -> PrivacyStatus:
    status = privacy_check(prep.num_tables, prep.dimension)
    if status is PrivacyStatus.INADMISSIBLE and not prep.config.allow_insecure_lsh:
        raise PrivacyError(
            f"publishing L={prep.num_tables} hash values of d={prep.dimension}-dimensional "
            f"instances would determine them; lower --lsh-l below d or pass "
            f"--allow-insecure-lsh to proceed anyway"
        )
    return status


def run_preprocessing(prep: PreparedRun, ledger: CommLedger):
    lsh_cfg = LshConfig(
        r=prep.config.lsh_r, num_tables=prep.num_tables, seed=prep.config.seed_lsh
    )
    return preprocess(prep.parties, lsh_cfg, tie_seed=prep.config.seed_tie, ledger=ledger)


@dataclass
class ExperimentResult:
    prep: PreparedRun
    models: dict[str, GbdtModel]
    errors: dict[str, float]
    ledger: CommLedger
    tracker: Optional[RoundErrorTracker]
    privacy: Optional[PrivacyStatus]


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    prep = prepare_run(cfg)
    params = cfg.gbdt_params()
    ledger = CommLedger()
    models: dict[str, GbdtModel] = {}
    tracker: Optional[RoundErrorTracker] = None
    privacy: Optional[PrivacyStatus] = None

    if "simfl" in cfg.methods:
        privacy = enforce_privacy_gate(prep)
        run_preprocessing(prep, ledger)
        schedule = TrainingSchedule.make(cfg.schedule, cfg.trees, cfg.parties)
        tracker = RoundErrorTracker(prep.parties, _position_maps(prep.parties), delta=cfg.delta)
        models["simfl"] = train_simfl(prep.parties, params, schedule, ledger, observer=tracker)
    if "tfl" in cfg.methods:
        schedule = TrainingSchedule.make(cfg.schedule, cfg.trees, cfg.parties)
        models["tfl"] = train_tfl(prep.parties, params, schedule)
    if "solo" in cfg.methods:
        for p in prep.parties:
            models[f"solo_p{p.party_id}"] = train_solo(p, params)
    if "allin" in cfg.methods:
        X_all = sparse.vstack([p.X for p in prep.parties], format="csr")
        y_all = np.concatenate([p.y for p in prep.parties])
        models["allin"] = train_allin(TrainMatrix(X_all), y_all, params)

    errors = {
        name: test_error(model, prep.X_test, prep.y_test) for name, model in models.items()
    }
    return ExperimentResult(prep, models, errors, ledger, tracker, privacy)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _closed_form_bytes(n_total: int, num_parties: int, num_tables: int, depth: int) -> dict:
    slots = (1 << depth) - 1
    return {
        "preprocessing_bytes": 8 * num_parties * n_total * num_tables,
        "gradient_bytes_per_tree": 8 * n_total,
        "broadcast_bytes_per_tree": 8 * slots * (num_parties - 1),
        "per_tree_bytes": 8 * (n_total + slots * (num_parties - 1)),
    }


def _minmax(values: Sequence[int]) -> dict:
    return {"min": int(min(values)), "max": int(max(values))} if values else {"min": 0, "max": 0}


def build_manifest(result: ExperimentResult) -> dict:
    prep = result.prep
    cfg = prep.config
    n_total = sum(len(p) for p in prep.parties)
    manifest: dict = {
        "version": __version__,
        "config": cfg.as_dict(),
        "dataset": {
            "name": prep.dataset_name,
            "num_features": prep.dimension,
            "train_instances": n_total,
            "test_instances": int(prep.y_test.shape[0]),
            "party_sizes": [len(p) for p in prep.parties],
            "party_positive_fraction": [round(float(np.mean(p.y)), 6) for p in prep.parties],
        },
        "lsh": {
            "r": cfg.lsh_r,
            "num_tables": prep.num_tables,
            "privacy": result.privacy.value if result.privacy is not None else None,
        },
        "test_errors": {k: round(v, 6) for k, v in sorted(result.errors.items())},
    }
    if "simfl" in result.models:
        manifest["closed_form"] = _closed_form_bytes(
            n_total, cfg.parties, prep.num_tables, cfg.depth
        )
        rounds = cfg.trees
        manifest["ledger"] = {
            "preprocessing_bytes": result.ledger.preprocessing_bytes,
            "training_bytes": result.ledger.training_bytes,
            "total_bytes": result.ledger.total_bytes,
            "gradient_bytes_per_tree": _minmax(result.ledger.gradient_bytes_per_tree(rounds)),
            "broadcast_bytes_per_tree": _minmax(result.ledger.broadcast_bytes_per_tree(rounds)),
        }
    if result.tracker is not None:
        reports = result.tracker.reports
        manifest["epsilon"] = {
            "delta": cfg.delta,
            "rounds": len(reports),
            "within_bound": sum(1 for r in reports if r.within_bound),
            "max_epsilon": max((r.epsilon for r in reports), default=0.0),
            "max_dual_path_gap": max(
                (abs(r.epsilon - r.epsilon_objective) for r in reports), default=0.0
            ),
            "d_m": result.tracker.d_m,
            "d_m_method": result.tracker.d_m_method,
            "d_t": {str(pid): v for pid, v in sorted(result.tracker.d_t.items())},
        }
    return manifest


def write_run_outputs(result: ExperimentResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "manifest.json", build_manifest(result))

    with open(out_dir / "errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "test_error"])
        for name in sorted(result.errors):
            writer.writerow([name, f"{result.errors[name]:.6f}"])

    if result.tracker is not None:
        with open(out_dir / "epsilon.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["round", "trainer", "epsilon", "epsilon_objective", "bound", "pass",
                 "xi_abs_max", "xi_cap"]
            )
            for r in result.tracker.reports:
                writer.writerow(
                    [r.round_index, r.trainer, f"{r.epsilon:.10g}",
                     f"{r.epsilon_objective:.10g}", f"{r.bound:.10g}",
                     int(r.within_bound), f"{r.xi_abs_max:.10g}", f"{r.xi_cap:.10g}"]
                )

    models_dir = out_dir / "models"
    models_dir.mkdir(exist_ok=True)
    for name, model in sorted(result.models.items()):
        model.save(models_dir / f"{name}.json")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_preprocess(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    prep = prepare_run(cfg)
    privacy = enforce_privacy_gate(prep)
    ledger = CommLedger()
    funcs, tables = run_preprocessing(prep, ledger)

    out_dir = Path(cfg.out) / "preprocess"
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "projections.npy", funcs.A)
    np.save(out_dir / "offsets.npy", funcs.b)
    np.save(out_dir / "table_gids.npy", tables.merged_gids)
    np.save(out_dir / "table_values.npy", tables.merged_values)
    for p in prep.parties:
        np.save(out_dir / f"similarity_p{p.party_id}.npy", p.similarity.entries)
        np.save(out_dir / f"gids_p{p.party_id}.npy", p.gids)

    n_total = sum(len(p) for p in prep.parties)
    manifest = {
        "version": __version__,
        "config": cfg.as_dict(),
        "dataset": {
            "name": prep.dataset_name,
            "num_features": prep.dimension,
            "train_instances": n_total,
            "party_sizes": [len(p) for p in prep.parties],
        },
        "lsh": {"r": cfg.lsh_r, "num_tables": prep.num_tables, "privacy": privacy.value},
        "ledger": {"preprocessing_bytes": ledger.preprocessing_bytes},
        "closed_form": {
            "preprocessing_bytes": 8 * cfg.parties * n_total * prep.num_tables
        },
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(f"wrote {out_dir}/ ({ledger.preprocessing_bytes} preprocessing bytes over "
          f"{cfg.parties} parties)")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    result = run_experiment(cfg)
    out_dir = Path(cfg.out)
    write_run_outputs(result, out_dir)
    for name in sorted(result.errors):
        print(f"{name}: test_error={result.errors[name]:.4f}")
    if result.tracker is not None:
        within = sum(1 for r in result.tracker.reports if r.within_bound)
        print(f"epsilon within bound: {within}/{len(result.tracker.reports)} rounds")
    print(f"wrote {out_dir}/manifest.json")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    model_path = Path(args.model)
    if not model_path.is_file():
        raise ConfigError(f"model file not found: {model_path}")
    model = GbdtModel.load(model_path)
    data_path = resolve_dataset_path(args.data)
    ds = parse_libsvm(data_path, name=data_path.name)
    X, y, _ = ds.to_arrays()

    needed = 1 + max(
        (int(np.max(t.feature)) for t in model.trees if (t.feature >= 0).any()), default=0
    )
    if X.shape[1] < needed:
        X = sparse.hstack(
            [X, sparse.csr_matrix((X.shape[0], needed - X.shape[1]))], format="csr"
        )
    err = test_error(model, X, y)
    print(f"model={model_path.name} data={data_path.name} test_error={err:.6f}")
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "data", "test_error"])
            writer.writerow([model_path.name, data_path.name, f"{err:.6f}"])
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    try:
        if args.axis == "theta":
            values = [float(v) for v in args.values.split(",") if v.strip()]
        else:
            values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be a comma-separated list for axis {args.axis}")
    if not values:
        raise ConfigError("--values is empty")

    rows = []
    for v in values:
        run_cfg = dataclasses.replace(cfg, **{("theta" if args.axis == "theta" else "parties"): v})
        run_cfg.validate()
        result = run_experiment(run_cfg)
        for name in sorted(result.errors):
            rows.append((args.axis, v, name, result.errors[name]))
        print(f"{args.axis}={v}: " + "  ".join(
            f"{n}={result.errors[n]:.4f}" for n in sorted(result.errors)
        ))

    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "method", "test_error"])
        for axis, v, name, err in rows:
            writer.writerow([axis, v, name, f"{err:.6f}"])
    print(f"wrote {out_dir}/sweep.csv")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .report import render_all

    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    written = render_all(run_dir)
    if not written:
        raise ConfigError(
            f"nothing to render in {run_dir} (expected errors.csv, epsilon.csv, "
            f"sweep.csv, or manifest.json)"
        )
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--dataset", help="dataset name under FEDBOOST_DATA, or a file path")
    p.add_argument("--parties", type=int, help="number of simulated parties")
    p.add_argument("--theta", type=float, help="unbalanced split ratio in (0, 1)")
    p.add_argument("--mode", choices=["balanced", "unbalanced"], help="partition mode")
    p.add_argument("--trees", type=int, help="boosting rounds")
    p.add_argument("--depth", type=int, help="maximum tree depth")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--lambda", type=float, dest="lam", help="leaf L2 regularisation")
    p.add_argument("--gamma", type=float, help="per-leaf split penalty")
    p.add_argument("--lsh-r", type=float, dest="lsh_r", help="hash bucket width")
    p.add_argument("--lsh-l", type=int, dest="lsh_l",
                   help="number of hash tables (default min(40, d-1))")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--methods", help="comma-separated subset of simfl,solo,allin,tfl")
    p.add_argument("--schedule", choices=["round_robin", "contiguous"])
    p.add_argument("--seed-split", type=int, dest="seed_split")
    p.add_argument("--seed-partition", type=int, dest="seed_partition")
    p.add_argument("--seed-lsh", type=int, dest="seed_lsh")
    p.add_argument("--seed-tie", type=int, dest="seed_tie")
    p.add_argument("--out", help="output directory")
    p.add_argument("--allow-insecure-lsh", action="store_const", const=True,
                   dest="allow_insecure_lsh", help="run even when L >= d")
    p.add_argument("--fast", action="store_const", const=True,
                   help="CI profile: 100 trees unless --trees is given")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedboost",
        description="simulated federated gradient boosting with similarity weighting",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_pre = sub.add_parser("preprocess", help="hash, merge tables, persist similarity sidecars")
    _add_config_flags(p_pre)
    p_pre.set_defaults(func=cmd_preprocess)

    p_train = sub.add_parser("train", help="train requested methods and write a run directory")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a saved model on a libsvm file")
    p_eval.add_argument("--model", required=True, help="model JSON path")
    p_eval.add_argument("--data", required=True, help="libsvm file (name or path)")
    p_eval.add_argument("--out", help="optional CSV output path")
    p_eval.set_defaults(func=cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="train repeatedly along one axis, write sweep.csv")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--axis", choices=["theta", "parties"], required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="render PNG figures for a run directory")
    p_report.add_argument("--run", required=True, help="run directory (the --out of train/sweep)")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LibsvmParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except PrivacyError as exc:
        print(f"privacy violation: {exc}", file=sys.stderr)
        return EXIT_PRIVACY


if __name__ == "__main__":
    sys.exit(main())
