"""Command-line pipeline: simulate/ingest -> anchors -> influence -> solve -> evaluate.

Every subcommand reads a JSON run configuration (``--config``); missing
sections fall back to the library defaults. Outputs go under ``--out`` and are
written atomically, with ``manifest.json`` last.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, _io
from .data import Dataset, SimulationConfig, build_dataset, ingest_interactions, load_dataset, save_dataset, simulate_dataset
from .errors import ConfigError, DataError, DisclosureError
from .evaluation import (
    EvalConfig,
    RetrainCache,
    approximation_error_study,
    evaluate_selection,
    run_comparison,
    summarize,
    write_reports,
)
from .game import SolverConfig, best_response_loop, sample_final_selection, save_strategies
from .influence import (
    LissaConfig,
    build_anchor_set,
    build_influence_table,
    save_anchor_set,
    save_influence_table,
)
from .recmodel import TrainerConfig, save_model, train_masked

log = logging.getLogger("disclosure")


@dataclass(frozen=True)
class DatasetSection:
    source: str = "simulate"
    simulation: SimulationConfig = SimulationConfig()
    path: str | None = None
    neg_ratio: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("simulate", "ingest"):
            raise ConfigError("dataset.source must be 'simulate' or 'ingest'")
        if self.source == "ingest" and not self.path:
            raise ConfigError("dataset.path is required when dataset.source is 'ingest'")
        if self.neg_ratio < 1:
            raise ConfigError("dataset.neg_ratio must be >= 1")


@dataclass(frozen=True)
class AnchorSection:
    T: int = 2
    mean: float = 0.9
    first_full: bool = False
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    k: int = 5
    methods: tuple = ("base", "random", "threshold", "ifrqe", "ifrqe++")
    n_seeds: int = 1
    lambdas: tuple | None = None
    oracle_samples: int = 10


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = DatasetSection()
    trainer: TrainerConfig = TrainerConfig()
    lissa: LissaConfig = LissaConfig()
    solver: SolverConfig = SolverConfig()
    anchors: AnchorSection = AnchorSection()
    eval: EvalSection = EvalSection()
    out: str | None = None
    keep_psi: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_seed(self, seed: int) -> RunConfig:
        """Override every section seed."""
        ds = replace(self.dataset, seed=seed, simulation=replace(self.dataset.simulation, seed=seed))
        return replace(
            self,
            dataset=ds,
            trainer=replace(self.trainer, seed=seed),
            lissa=replace(self.lissa, seed=seed),
            solver=replace(self.solver, seed=seed),
            anchors=replace(self.anchors, seed=seed),
        )


def _build(cls, raw, where: str):
    """Instantiate a (possibly nested) config dataclass from a JSON object."""
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name) if name in fields else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def load_config(path=None, seed=None, out=None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = _io.read_json(path)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    cfg = _build(RunConfig, raw, "config")
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if out is not None:
        cfg = replace(cfg, out=out)
    if cfg.out is None:
        raise ConfigError("no output directory; pass --out or set 'out' in the config")
    return cfg


# -- stages -------------------------------------------------------------------


class Timer:
    def __init__(self):
        self.stages = {}

    def __call__(self, name):
        timer = self

        class _Stage:
            def __enter__(self):
                self.start = time.perf_counter()
                log.info("stage %s", name)

            def __exit__(self, exc_type, exc, tb):
                timer.stages[name] = time.perf_counter() - self.start
                if exc is not None and isinstance(exc, DisclosureError) and not getattr(exc, "_staged", False):
                    exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
                    exc._staged = True
                return False

        return _Stage()


def make_dataset(cfg: RunConfig) -> tuple[Dataset, dict]:
    ds = cfg.dataset
    if ds.source == "simulate":
        inter = simulate_dataset(ds.simulation)
    else:
        inter = ingest_interactions(ds.path)
    d = build_dataset(inter, seed=ds.seed, neg_ratio=ds.neg_ratio)
    info = {"source": ds.source, "sparsity": inter.sparsity, "n_raw_interactions": inter.n_interactions}
    return d, info


def obtain_dataset(cfg: RunConfig, dataset_dir) -> Dataset:
    if dataset_dir is None:
        return make_dataset(cfg)[0]
    path = Path(dataset_dir)
    if not (path / "manifest.json").exists():
        raise DataError(f"{path} has no manifest.json; run 'simulate' or 'ingest' first")
    return load_dataset(path)


def _write_manifest(out: Path, command: str, cfg: RunConfig, timer: Timer, extra=None):
    doc = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "timings": {**timer.stages, "total": sum(timer.stages.values())},
    }
    if extra:
        doc.update(extra)
    _io.write_json(out / "manifest.json", doc)


def cmd_build_dataset(cfg: RunConfig, command: str) -> dict:
    out = Path(cfg.out)
    timer = Timer()
    with timer("dataset"):
        d, info = make_dataset(cfg)
    with timer("write"):
        save_dataset(d, out, extra_manifest={**info, "command": command, "config": cfg.to_dict()})
    print(
        f"{d.n_users} users, {d.n_items} items, {info['n_raw_interactions']} interactions, "
        f"sparsity {100 * info['sparsity']:.2f}%, {d.Z} training samples"
    )
    return info


def cmd_solve(cfg: RunConfig, dataset_dir=None, oracle: bool = False) -> dict:
    """Anchors, influence table, best-response loop, final draw and retrain."""
    out = Path(cfg.out)
    timer = Timer()
    with timer("dataset"):
        d = obtain_dataset(cfg, dataset_dir)
    with timer("anchors"):
        anchors = build_anchor_set(d, cfg.anchors.T, cfg.anchors.mean, cfg.trainer, cfg.anchors.seed, cfg.anchors.first_full)
    with timer("influence"):
        table = build_influence_table(anchors, d, cfg.lissa, keep_psi=cfg.keep_psi)
    retrain = RetrainCache(d, cfg.trainer) if oracle else None
    with timer("solve"):
        state = best_response_loop(d, anchors, table, cfg.solver, oracle=retrain)
    with timer("final_train"):
        o = sample_final_selection(state.strategies, cfg.solver.seed)
        model = train_masked(d, o, cfg.trainer)
    with timer("write"):
        save_anchor_set(anchors, out / "anchors")
        save_influence_table(table, out / "influence")
        save_strategies(out / "strategies.json", state.strategies, {"changes": state.changes, "sweeps": state.sweeps, "T": anchors.T})
        _io.write_csv(out / "selection.csv", ["index", "user", "selected"], zip(range(d.Z), d.train_users.tolist(), o.astype(int).tolist()))
        save_model(model, out / "model", stage="final")
    extra = {
        "payoff": "retrain" if oracle else "influence",
        "sweeps": state.sweeps,
        "changes": state.changes,
        "n_selected": int(o.sum()),
        "Z": d.Z,
        "damping": cfg.lissa.damping,
    }
    if retrain is not None:
        extra["retrains"] = retrain.retrains
    _write_manifest(out, "solve", cfg, timer, extra)
    print(f"solved in {state.sweeps} sweeps; {int(o.sum())}/{d.Z} interactions disclosed; {sum(timer.stages.values()):.1f}s")
    return {"timings": timer.stages, **extra}


def _eval_config(cfg: RunConfig, lam: float) -> EvalConfig:
    return EvalConfig(
        methods=tuple(cfg.eval.methods),
        n_seeds=cfg.eval.n_seeds,
        k=cfg.eval.k,
        T=cfg.anchors.T,
        anchor_mean=cfg.anchors.mean,
        trainer=cfg.trainer,
        lissa=cfg.lissa,
        solver=replace(cfg.solver, lam=lam),
        seed=cfg.solver.seed,
    )


def cmd_evaluate(cfg: RunConfig, dataset_dir=None, run_dir=None) -> dict:
    """Comparison table over the configured methods (and lambdas)."""
    out = Path(cfg.out)
    timer = Timer()
    with timer("dataset"):
        d = obtain_dataset(cfg, dataset_dir)
    lambdas = cfg.eval.lambdas or (cfg.solver.lam,)
    reports = []
    errors = {}
    with timer("compare"):
        for lam in lambdas:
            ecfg = _eval_config(cfg, lam)
            reps, summ = run_comparison(d, ecfg)
            reports.extend(reps)
            errors.update(summ.get("_errors", {}))
            if run_dir is not None:
                sel = Path(run_dir) / "selection.csv"
                if not sel.exists():
                    raise DataError(f"{sel} not found; run 'solve' first")
                _, rows = _io.read_csv(sel)
                o = np.array([int(r[2]) for r in rows], dtype=bool)
                if o.size != d.Z:
                    raise DataError(f"{sel} has {o.size} rows but the dataset has {d.Z} training samples")
                reports.append(evaluate_selection(d, o, "run", ecfg, cfg.solver.seed))
    summary = {}
    for lam in lambdas:
        summary[f"lambda={lam:g}"] = summarize([r for r in reports if r.lam == lam])
    if errors:
        summary["_errors"] = errors
    with timer("write"):
        write_reports(reports, summary, out)
    _write_manifest(out, "evaluate", cfg, timer, {"n_rows": len(reports)})
    for lam in lambdas:
        for method, row in summary[f"lambda={lam:g}"].items():
            print(f"lambda={lam:g} {method:10s} reward {row['reward']:+.4f}  F1 {row['F1']:.4f}  wv {row['wv']:.3f}")
    return summary


def cmd_oracle_check(cfg: RunConfig, dataset_dir=None) -> dict:
    """Influence approximation vs retraining on random selections."""
    out = Path(cfg.out)
    timer = Timer()
    with timer("dataset"):
        d = obtain_dataset(cfg, dataset_dir)
    with timer("study"):
        res = approximation_error_study(
            d, cfg.trainer, cfg.lissa, T=cfg.anchors.T, n_samples=cfg.eval.oracle_samples,
            mean=cfg.anchors.mean, seed=cfg.anchors.seed,
        )
    with timer("write"):
        rows = [[r["T"], _io.fmt_float(r["mean_relative_error"]), _io.fmt_float(r["error_of_means"])] for r in res["rows"]]
        _io.write_csv(out / "approximation_error.csv", ["T", "mean_relative_error", "error_of_means"], rows)
        _io.write_json(out / "approximation_error.json", res)
    _write_manifest(out, "oracle-check", cfg, timer)
    for r in res["rows"]:
        print(f"T={r['T']}: mean relative error {100 * r['mean_relative_error']:.2f}%")
    return res


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disclosure", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(sp)
    sp = sub.add_parser("ingest", help="split an interaction CSV (user_id,item_id[,beta])")
    common(sp)
    sp.add_argument("--input", help="interaction file; overrides dataset.path")
    sp = sub.add_parser("solve", help="solve the disclosure game")
    common(sp)
    sp.add_argument("--dataset", help="dataset directory (default: build from the config)")
    sp.add_argument("--oracle", action="store_true", help="score payoffs by retraining instead of influence")
    sp = sub.add_parser("evaluate", help="compare selection methods")
    common(sp)
    sp.add_argument("--dataset", help="dataset directory (default: build from the config)")
    sp.add_argument("--run", help="solve output directory to include as an extra row")
    sp = sub.add_parser("oracle-check", help="influence approximation error against retraining")
    common(sp)
    sp.add_argument("--dataset", help="dataset directory (default: build from the config)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "simulate":
            cfg = replace(cfg, dataset=replace(cfg.dataset, source="simulate"))
            cmd_build_dataset(cfg, "simulate")
        elif args.command == "ingest":
            path = args.input or cfg.dataset.path
            if not path:
                raise ConfigError("ingest needs --input or dataset.path")
            cfg = replace(cfg, dataset=replace(cfg.dataset, source="ingest", path=path))
            cmd_build_dataset(cfg, "ingest")
        elif args.command == "solve":
            cmd_solve(cfg, args.dataset, args.oracle)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.dataset, args.run)
        elif args.command == "oracle-check":
            cmd_oracle_check(cfg, args.dataset)
    except DisclosureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
