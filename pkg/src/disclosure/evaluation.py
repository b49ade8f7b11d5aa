"""Metrics, baseline selection policies, the retraining oracle and comparisons."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _io
from .data import Dataset
from .errors import ConfigError, DisclosureError
from .game import SolverConfig, best_response_loop, sample_final_selection
from .influence import (
    LissaConfig,
    approx_validation_losses,
    build_anchor_set,
    build_influence_table,
)
from .recmodel import FactorModel, TrainerConfig, recommend_topk, train_masked, validation_losses

log = logging.getLogger(__name__)

METHODS = ("base", "random", "threshold", "ifrqe", "ifrqe++", "scr")
METRIC_COLUMNS = ("F1", "precision", "recall", "NDCG", "MRR", "wv", "reward", "time")


@dataclass
class MetricsReport:
    method: str
    seed: int
    F1: float
    precision: float
    recall: float
    NDCG: float
    MRR: float
    wv: float
    reward: float
    loss_term: float
    penalty_term: float
    lam: float
    time: float
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = asdict(self)
        row.pop("extra")
        return row


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- metrics ------------------------------------------------------------------


def metric_wv(d: Dataset, o) -> float:
    """Mean over users of the summed willingness of disclosed interactions."""
    o = np.asarray(o, dtype=float)
    if o.shape != (d.Z,):
        raise ValueError(f"selection has shape {o.shape}, expected ({d.Z},)")
    return float(np.dot(o, d.beta)) / d.n_users


def user_penalties(d: Dataset, o) -> np.ndarray:
    o = np.asarray(o, dtype=float)
    return np.bincount(d.train_users, weights=o * d.beta, minlength=d.n_users)


def rank_metrics(recs, relevant, k: int = 5):
    """(precision, recall, NDCG, MRR) of one ranked list with binary relevance."""
    recs = list(recs)[:k]
    relevant = set(int(i) for i in relevant)
    hits = [int(i) in relevant for i in recs]
    n_hit = sum(hits)
    precision = n_hit / k
    recall = n_hit / len(relevant) if relevant else 0.0
    dcg = sum(1.0 / math.log2(r + 2) for r, h in enumerate(hits) if h)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    ndcg = dcg / idcg if idcg else 0.0
    first = next((r for r, h in enumerate(hits) if h), None)
    mrr = 0.0 if first is None else 1.0 / (first + 1)
    return precision, recall, ndcg, mrr


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def metric_ranking(m: FactorModel, d: Dataset, k: int = 5) -> dict:
    """Macro-averaged precision, recall, NDCG and MRR at k over users.

    F1 is the harmonic mean of the averaged precision and recall, so the
    identity F1 = 2PR/(P+R) holds for every reported row.
    """
    rows = []
    for u in range(d.n_users):
        test = d.D(u)
        if test.size == 0:
            raise ValueError(f"user {u} has no test items")
        rows.append(rank_metrics(recommend_topk(m, d, u, k), test, k))
    p, r, ndcg, mrr = (float(x) for x in np.mean(rows, axis=0))
    return {"precision": p, "recall": r, "F1": f1_score(p, r), "NDCG": ndcg, "MRR": mrr}


# -- baselines ----------------------------------------------------------------


def baseline_selection(d: Dataset, policy: str, seed: int = 0) -> np.ndarray:
    """Base discloses everything, Random flips fair coins, Threshold hides beta > 0.5.

    Threshold keeps each user's single lowest-beta interaction when it would
    otherwise hide all of them.
    """
    if policy == "base":
        return np.ones(d.Z, dtype=bool)
    if policy == "random":
        return np.random.default_rng(seed).random(d.Z) < 0.5
    if policy == "threshold":
        o = d.beta <= 0.5
        for u in range(d.n_users):
            sl = d.train_slice(u)
            if not o[sl].any():
                o[sl.start + int(np.argmin(d.beta[sl]))] = True
        return o
    raise ConfigError(f"unknown baseline policy {policy!r}")


# -- retraining oracle --------------------------------------------------------


def scr_oracle(d: Dataset, o, trainer: TrainerConfig):
    """Retrain from scratch on ``o``; returns the model and true validation losses."""
    m = train_masked(d, o, trainer)
    return m, validation_losses(m, d)


class RetrainCache:
    """Callable ``(o, u) -> validation loss of u`` that retrains once per distinct mask."""

    def __init__(self, d: Dataset, trainer: TrainerConfig):
        self.d, self.trainer = d, trainer
        self.cache = {}
        self.retrains = 0

    def __call__(self, o, u: int) -> float:
        key = np.packbits(np.asarray(o, dtype=bool)).tobytes()
        if key not in self.cache:
            if not np.any(o):
                # an empty mask leaves the initial model in place
                m = FactorModel.init(self.d.n_users, self.d.n_items, self.trainer.dim, self.trainer.seed)
                self.cache[key] = validation_losses(m, self.d)
            else:
                self.cache[key] = scr_oracle(self.d, o, self.trainer)[1]
            self.retrains += 1
        return float(self.cache[key][u])


def reward_terms(m: FactorModel, d: Dataset, o, lam: float):
    """Per-user mean loss term and willingness term of the reward."""
    loss = validation_losses(m, d)
    pen = user_penalties(d, o)
    return float(loss.mean()), float(pen.mean()), float(np.mean(-loss - lam * pen))


def approximation_error_study(
    d: Dataset,
    trainer: TrainerConfig,
    lissa: LissaConfig,
    T: int = 2,
    n_samples: int = 10,
    mean: float = 0.9,
    sample_mean: float = 0.9,
    seed: int = 0,
) -> dict:
    """Influence-approximated vs retrained total validation loss.

    Anchors are nested, so the estimate for every ``t <= T`` uses the first
    ``t`` anchors of one anchor set. Selections are drawn Bernoulli(sample_mean).
    """
    start = time.perf_counter()
    anchors = build_anchor_set(d, T, mean, trainer, seed)
    table = build_influence_table(anchors, d, lissa, keep_psi=False)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    true, approx = [], {t: [] for t in range(1, T + 1)}
    for _ in range(n_samples):
        o = rng.random(d.Z) < sample_mean
        true.append(float(scr_oracle(d, o, trainer)[1].sum()))
        for t in range(1, T + 1):
            approx[t].append(float(approx_validation_losses(table.prefix(t), anchors.prefix(t), o).sum()))
    true = np.array(true)
    out = {"true": true.tolist(), "seconds": time.perf_counter() - start, "rows": []}
    for t in range(1, T + 1):
        a = np.array(approx[t])
        out["rows"].append(
            {
                "T": t,
                "approx": a.tolist(),
                "mean_relative_error": float(np.mean(np.abs(a - true) / np.abs(true))),
                "error_of_means": float(abs(a.mean() - true.mean()) / abs(true.mean())),
            }
        )
    return out


# -- comparison ---------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple = ("base", "random", "threshold", "ifrqe", "ifrqe++")
    n_seeds: int = 1
    k: int = 5
    T: int = 2
    anchor_mean: float = 0.9
    trainer: TrainerConfig = TrainerConfig()
    lissa: LissaConfig = LissaConfig()
    solver: SolverConfig = SolverConfig()
    seed: int = 0

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if self.n_seeds < 1 or self.k < 1 or self.T < 1:
            raise ConfigError("n_seeds, k and T must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def solve_selection(d: Dataset, method: str, cfg: EvalConfig, seed: int):
    """Selection produced by one method, with timing and diagnostics."""
    start = time.perf_counter()
    info = {}
    if method in ("base", "random", "threshold"):
        o = baseline_selection(d, method, seed)
    else:
        T = 1 if method == "ifrqe" else cfg.T
        trainer = replace(cfg.trainer, seed=seed)
        anchors = build_anchor_set(d, T, cfg.anchor_mean, trainer, seed)
        table = build_influence_table(anchors, d, replace(cfg.lissa, seed=seed), keep_psi=False)
        solver = replace(cfg.solver, seed=seed)
        oracle = RetrainCache(d, trainer) if method == "scr" else None
        state = best_response_loop(d, anchors, table, solver, oracle=oracle)
        o = sample_final_selection(state.strategies, seed)
        info = {"sweeps": state.sweeps, "changes": state.changes}
        if oracle is not None:
            info["retrains"] = oracle.retrains
    info["solve_seconds"] = time.perf_counter() - start
    return o, info


def evaluate_selection(d: Dataset, o, method: str, cfg: EvalConfig, seed: int, solve_seconds: float = 0.0) -> MetricsReport:
    trainer = replace(cfg.trainer, seed=seed)
    m = train_masked(d, o, trainer)
    rank = metric_ranking(m, d, cfg.k)
    loss, pen, reward = reward_terms(m, d, o, cfg.solver.lam)
    return MetricsReport(
        method=method,
        seed=seed,
        F1=rank["F1"],
        precision=rank["precision"],
        recall=rank["recall"],
        NDCG=rank["NDCG"],
        MRR=rank["MRR"],
        wv=metric_wv(d, o),
        reward=reward,
        loss_term=loss,
        penalty_term=pen,
        lam=cfg.solver.lam,
        time=solve_seconds,
        fingerprint=fingerprint(cfg.to_dict()),
    )


def run_comparison(d: Dataset, cfg: EvalConfig):
    """Every configured method over ``n_seeds`` seeds.

    A failing method is logged and skipped so the others still report.
    Returns the per-seed reports and a per-method summary.
    """
    reports, errors = [], {}
    for method in cfg.methods:
        for i in range(cfg.n_seeds):
            seed = cfg.seed + i
            try:
                o, info = solve_selection(d, method, cfg, seed)
                rep = evaluate_selection(d, o, method, cfg, seed, info["solve_seconds"])
                rep.extra = info
                reports.append(rep)
            except DisclosureError as exc:
                log.error("method %s seed %d failed: %s", method, seed, exc)
                errors.setdefault(method, []).append(str(exc))
    return reports, summarize(reports, errors)


def summarize(reports, errors=None) -> dict:
    out = {}
    for method in dict.fromkeys(r.method for r in reports):
        rows = [r for r in reports if r.method == method]
        entry = {"n": len(rows)}
        for col in METRIC_COLUMNS:
            vals = np.array([getattr(r, col) for r in rows], dtype=float)
            entry[col] = float(vals.mean())
            entry[col + "_se"] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None
        entry["reward_median"] = float(np.median([r.reward for r in rows]))
        out[method] = entry
    if errors:
        out["_errors"] = errors
    return out


PERCENT_COLUMNS = ("F1", "precision", "recall", "NDCG", "MRR")


def write_reports(reports, summary, out_dir):
    """One CSV row per method and seed, plus a JSON summary."""
    header = list(reports[0].as_row().keys()) if reports else list(MetricsReport.__dataclass_fields__)
    header = [h for h in header if h != "extra"] + [c + "_pct" for c in PERCENT_COLUMNS]
    rows = []
    for r in reports:
        row = r.as_row()
        vals = [row[h] for h in header if not h.endswith("_pct")]
        vals += [100.0 * row[c] for c in PERCENT_COLUMNS]
        rows.append([_io.fmt_float(v) if isinstance(v, float) else v for v in vals])
    _io.write_csv(f"{out_dir}/report.csv", header, rows)
    _io.write_json(f"{out_dir}/summary.json", summary)
