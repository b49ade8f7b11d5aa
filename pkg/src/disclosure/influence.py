"""Influence-function approximation of per-user validation losses.

A handful of anchor masks are trained for real. For any other joint
selection ``o`` the validation loss of user ``u`` is extrapolated from the
nearest anchor ``t`` by

    L_u(o) ~ anchor_loss[t, u] - (1/Z) * sum_i o_i * scores[t, u, i]

where ``scores[t, u, i] = psi[t, u] . grad l(s_i)`` and ``psi[t, u]`` is the
damped inverse Hessian applied to the gradient of user ``u``'s validation
loss. Because the damped Hessian is symmetric, one inverse-HVP per (anchor,
user) suffices instead of one per training sample.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _io
from .data import Dataset
from .errors import ConfigError, DegenerateSelectionError, LissaDivergenceError
from .recmodel import (
    FactorModel,
    TrainerConfig,
    batch_grad,
    batch_hvp,
    grad_dots,
    load_model,
    save_model,
    train_masked,
    train_samples,
    val_samples,
    validation_losses,
)

log = logging.getLogger(__name__)

MAX_ANCHOR_RETRIES = 10


def _l2(m: FactorModel) -> float:
    return float(m.meta.get("l2", 0.0))


def _seed_for(seed: int, *key: int) -> np.random.SeedSequence:
    # spawn-key children stay identical when T grows, so anchor sets nest
    return np.random.SeedSequence(seed, spawn_key=tuple(key))


@dataclass(frozen=True)
class LissaConfig:
    """Settings of the stochastic inverse-HVP recursion.

    ``scale`` may be the string ``"auto"``, in which case a safe value is
    chosen per model by :func:`suggest_scale`. ``probe_batch`` at or above
    the training count switches to exact full-batch Hessian products.
    """

    n_iters: int = 30
    damping: float = 0.01
    scale: float | str = 10.0
    probe_batch: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_iters < 1:
            raise ConfigError("lissa n_iters must be >= 1")
        if self.damping < 0:
            raise ConfigError("lissa damping must be >= 0")
        if self.scale != "auto" and not (isinstance(self.scale, (int, float)) and self.scale > 0):
            raise ConfigError("lissa scale must be positive or 'auto'")
        if self.probe_batch < 1:
            raise ConfigError("lissa probe_batch must be >= 1")


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray  # (T, Z) bool
    params: tuple
    anchor_loss: np.ndarray  # (T, N)
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.anchors.shape[0]

    def prefix(self, T: int) -> AnchorSet:
        """The first ``T`` anchors, which is what a smaller run would have drawn."""
        if not 1 <= T <= self.T:
            raise ValueError(f"prefix length {T} outside [1, {self.T}]")
        return AnchorSet(self.anchors[:T], self.params[:T], self.anchor_loss[:T], {**self.meta, "T": T})


@dataclass(frozen=True)
class InfluenceTable:
    scores: np.ndarray  # (T, N, Z)
    psi: np.ndarray | None  # (T, N, P) when kept
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.scores.shape[0]

    def prefix(self, T: int) -> InfluenceTable:
        psi = None if self.psi is None else self.psi[:T]
        return InfluenceTable(self.scores[:T], psi, {**self.meta, "T": T})


# -- anchors ------------------------------------------------------------------


def draw_anchor(Z: int, mean: float, seed: int, t: int, attempt: int = 0) -> np.ndarray:
    key = (t,) if attempt == 0 else (t, attempt)
    rng = np.random.default_rng(_seed_for(seed, *key))
    return rng.random(Z) < mean


def draw_anchor_masks(Z: int, T: int, mean: float, seed: int = 0, first_full: bool = False) -> np.ndarray:
    """``T`` distinct non-empty Bernoulli(mean) masks, shape (T, Z)."""
    anchors = []
    for t in range(T):
        if t == 0 and first_full:
            a = np.ones(Z, dtype=bool)
        else:
            for attempt in range(MAX_ANCHOR_RETRIES + 1):
                a = draw_anchor(Z, mean, seed, t, attempt)
                if a.any() and not any(np.array_equal(a, b) for b in anchors):
                    break
            else:
                raise DegenerateSelectionError(
                    f"could not draw a non-empty distinct anchor {t} in {MAX_ANCHOR_RETRIES} retries"
                )
        anchors.append(a)
    return np.array(anchors, dtype=bool).reshape(T, Z)


def build_anchor_set(
    d: Dataset,
    T: int = 1,
    mean: float = 0.9,
    trainer: TrainerConfig | None = None,
    seed: int = 0,
    first_full: bool = False,
) -> AnchorSet:
    """Draw ``T`` distinct Bernoulli(mean) anchor masks and train a model on each.

    Anchor ``t`` depends only on ``(seed, t)``, so the anchors of a run with
    ``T`` anchors are a prefix of those of any larger run. ``first_full``
    replaces anchor 0 by the all-ones mask (the basic single-model variant).
    """
    if T < 1:
        raise ConfigError("need at least one anchor")
    if not 0 < mean <= 1:
        raise ConfigError("anchor mean must lie in (0, 1]")
    trainer = trainer or TrainerConfig()
    anchors = draw_anchor_masks(d.Z, T, mean, seed, first_full)
    params, losses = [], []
    for t, a in enumerate(anchors):
        m = train_masked(d, a, trainer)
        log.info("anchor %d: %d samples, grad norm %.3g", t, int(a.sum()), m.meta["grad_norm"])
        params.append(m)
        losses.append(validation_losses(m, d))
    meta = {"T": T, "mean": mean, "seed": seed, "first_full": first_full}
    return AnchorSet(anchors, tuple(params), np.array(losses), meta)


def anchor_distances(anchors, o) -> np.ndarray:
    """Summed Hamming distance from ``o`` (shape (Z,) or (B, Z)) to every anchor."""
    anchors = np.asarray(anchors, dtype=bool)
    o = np.asarray(o, dtype=bool)
    if o.shape[-1] != anchors.shape[1]:
        raise ValueError(f"selection has length {o.shape[-1]}, anchors have {anchors.shape[1]}")
    if o.ndim == 1:
        return np.count_nonzero(anchors ^ o, axis=1)
    return np.count_nonzero(anchors[None, :, :] ^ o[:, None, :], axis=2)


def anchor_error_bound(anchors, selections) -> int:
    """Sum over ``selections`` of the distance to the nearest anchor.

    Up to the Hessian bound this is the total approximation error over the
    selections, so adding anchors can never increase it.
    """
    return int(anchor_distances(anchors, np.atleast_2d(selections)).min(axis=1).sum())


def nearest_anchor(a, o) -> int | np.ndarray:
    """Index of the anchor closest to ``o``; ties go to the smallest index."""
    anchors = a.anchors if isinstance(a, AnchorSet) else a
    dist = anchor_distances(anchors, o)
    if dist.ndim == 1:
        return int(np.argmin(dist))
    return np.argmin(dist, axis=1)


# -- LiSSA --------------------------------------------------------------------


def _pair_hessian_bound(m: FactorModel, d: Dataset) -> float:
    """Upper bound on the spectral norm of any single sample Hessian.

    For one pair the Hessian is phi'' * [e_i; e_u][e_i; e_u]^T plus phi'
    times an off-diagonal identity block, so its norm is at most
    0.25 (|e_u|^2 + |e_i|^2) + 1; a sample sums 1 + ratio such pairs.
    """
    s = train_samples(d)
    un = np.einsum("ud,ud->u", m.user_emb, m.user_emb)
    vn = np.einsum("id,id->i", m.item_emb, m.item_emb)
    items = np.concatenate([s.pos[:, None], s.neg], axis=1)
    per_pair = 0.25 * (un[s.users][:, None] + vn[items]) + 1.0
    return float(per_pair.sum(axis=1).max()) + _l2(m) * items.shape[1]


def top_eigenvalue(m: FactorModel, d: Dataset, mask, n_iters: int = 100, seed: int = 0) -> float:
    """Largest eigenvalue of the undamped masked Hessian by power iteration."""
    mask = np.asarray(mask, dtype=float)
    sel = np.flatnonzero(mask)
    if not sel.size:
        return 0.0
    s = train_samples(d, sel)
    v = np.random.default_rng(seed).standard_normal(m.n_params)
    lam = 0.0
    for _ in range(n_iters):
        v /= np.linalg.norm(v)
        w = batch_hvp(m, s, v, mask[sel], _l2(m)) / d.Z
        lam = float(v @ w)
        if not np.linalg.norm(w):
            return 0.0
        v = w
    return abs(lam)


def suggest_scale(m: FactorModel, d: Dataset, mask, cfg: LissaConfig) -> float:
    """A scale ``c`` that keeps ``I - (H_s + damping I)/c`` contractive.

    Full-batch probes use 1.1x the top eigenvalue of the damped Hessian;
    single-sample probes need the bound over individual sample Hessians.
    """
    if cfg.probe_batch >= d.Z:
        lam = top_eigenvalue(m, d, mask, seed=cfg.seed)
    else:
        lam = _pair_hessian_bound(m, d)
    return 1.1 * (lam + cfg.damping)


def lissa_ihvp(m: FactorModel, d: Dataset, mask, v, cfg: LissaConfig, scale: float | None = None) -> np.ndarray:
    """Estimate ``(H + damping I)^-1 v`` with the LiSSA recursion.

    ``H = (1/Z) sum_i mask_i Hessian l(s_i)`` as in :func:`recmodel.hvp`.
    Each iteration draws a fresh probe batch of uniformly chosen training
    indices; the masked single-index Hessian ``mask_i Hessian l(s_i)`` is an
    unbiased estimate of H. ``v`` may hold several right-hand sides as
    columns, which then share the probes.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[0] != m.n_params:
        raise ValueError(f"vector has leading size {v.shape[0]}, expected {m.n_params}")
    mask = np.ones(d.Z) if mask is None else np.asarray(mask, dtype=float)
    if mask.shape != (d.Z,):
        raise ValueError(f"mask has shape {mask.shape}, expected ({d.Z},)")
    c = scale if scale is not None else cfg.scale
    if c == "auto":
        c = suggest_scale(m, d, mask, cfg)
    c = float(c)
    l2 = _l2(m)
    rng = np.random.default_rng(cfg.seed)
    full = cfg.probe_batch >= d.Z
    if full:
        sel = np.flatnonzero(mask)
        full_samples = train_samples(d, sel)
        full_w = mask[sel]
    else:
        samples = train_samples(d)

    vnorm = np.linalg.norm(v, axis=0)
    x = v.copy()
    for j in range(cfg.n_iters):
        if full:
            hx = batch_hvp(m, full_samples, x, full_w, l2) / d.Z if sel.size else np.zeros_like(x)
        else:
            idx = rng.integers(0, d.Z, size=cfg.probe_batch)
            w = mask[idx]
            hx = batch_hvp(m, samples.take(idx), x, w, l2) / cfg.probe_batch if w.any() else np.zeros_like(x)
        x = v + x - (hx + cfg.damping * x) / c
        xnorm = np.linalg.norm(x, axis=0)
        # a contractive recursion grows at most linearly: |x_j| <= (j + 1) |v|
        limit = max(1e3, 2.0 * (j + 2)) * vnorm
        if not np.all(np.isfinite(xnorm)) or np.any(xnorm > limit):
            raise LissaDivergenceError(
                f"LiSSA diverged at iteration {j + 1} with scale c={c:g}; increase the scale"
            )
    return x / c


# -- influence table ----------------------------------------------------------


def validation_gradients(m: FactorModel, d: Dataset, users) -> np.ndarray:
    """Columns are the gradients of each listed user's validation loss."""
    return np.stack([batch_grad(m, val_samples(d, u)) for u in users], axis=1)


def build_influence_table(
    a: AnchorSet,
    d: Dataset,
    cfg: LissaConfig | None = None,
    keep_psi: bool = True,
    chunk: int = 256,
) -> InfluenceTable:
    """Per-anchor, per-user influence scores over every training sample.

    Users are processed in chunks so the validation-gradient block stays
    bounded in memory; the psi vectors are dropped unless ``keep_psi``.
    """
    cfg = cfg or LissaConfig()
    N, Z = d.n_users, d.Z
    P = a.params[0].n_params
    scores = np.empty((a.T, N, Z))
    psi_all = np.empty((a.T, N, P)) if keep_psi else None
    train = train_samples(d)
    scales = []
    for t, (m, mask) in enumerate(zip(a.params, a.anchors)):
        tcfg = LissaConfig(cfg.n_iters, cfg.damping, cfg.scale, cfg.probe_batch, int(_seed_for(cfg.seed, t).generate_state(1)[0]))
        c = suggest_scale(m, d, mask, tcfg) if cfg.scale == "auto" else float(cfg.scale)
        scales.append(c)
        for lo in range(0, N, chunk):
            users = np.arange(lo, min(N, lo + chunk))
            gval = validation_gradients(m, d, users)
            try:
                psi = lissa_ihvp(m, d, mask, gval, tcfg, scale=c)
            except LissaDivergenceError as exc:
                raise LissaDivergenceError(f"anchor {t}, users {users[0]}..{users[-1]}: {exc}") from exc
            scores[t, users] = grad_dots(m, train, psi, _l2(m))
            if keep_psi:
                psi_all[t, users] = psi.T
    meta = {
        "n_iters": cfg.n_iters,
        "damping": cfg.damping,
        "scale": scales,
        "probe_batch": cfg.probe_batch,
        "seed": cfg.seed,
    }
    return InfluenceTable(scores, psi_all, meta)


def approx_validation_losses(tbl: InfluenceTable, a: AnchorSet, o) -> np.ndarray:
    """Approximate validation loss of every user under joint selection ``o``."""
    o = np.asarray(o, dtype=float)
    t = nearest_anchor(a, o)
    Z = tbl.scores.shape[2]
    return a.anchor_loss[t] - tbl.scores[t] @ o / Z


def approx_validation_loss(tbl: InfluenceTable, a: AnchorSet, o, u: int) -> float:
    o = np.asarray(o, dtype=float)
    t = nearest_anchor(a, o)
    Z = tbl.scores.shape[2]
    return float(a.anchor_loss[t, u] - tbl.scores[t, u] @ o / Z)


# -- persistence --------------------------------------------------------------


def save_anchor_set(a: AnchorSet, out_dir):
    out_dir = Path(out_dir)
    for t, m in enumerate(a.params):
        save_model(m, out_dir / f"anchor_{t}")
    _io.write_json(
        out_dir / "anchors.json",
        {
            **a.meta,
            "T": a.T,
            "Z": int(a.anchors.shape[1]),
            "anchors": ["".join("1" if b else "0" for b in row) for row in a.anchors],
            "anchor_loss": a.anchor_loss.tolist(),
        },
    )


def load_anchor_set(in_dir) -> AnchorSet:
    in_dir = Path(in_dir)
    head = _io.read_json(in_dir / "anchors.json")
    anchors = np.array([[ch == "1" for ch in row] for row in head["anchors"]], dtype=bool).reshape(head["T"], head["Z"])
    params = tuple(load_model(in_dir / f"anchor_{t}") for t in range(head["T"]))
    meta = {k: v for k, v in head.items() if k not in ("anchors", "anchor_loss", "Z")}
    return AnchorSet(anchors, params, np.array(head["anchor_loss"], dtype=float), meta)


def save_influence_table(tbl: InfluenceTable, out_dir):
    """Manifest plus flat little-endian blocks indexed (t, u, global index)."""
    out_dir = Path(out_dir)
    _io.atomic_write_bytes(out_dir / "scores.f64", tbl.scores.astype("<f8").tobytes())
    if tbl.psi is not None:
        _io.atomic_write_bytes(out_dir / "psi.f64", tbl.psi.astype("<f8").tobytes())
    _io.write_json(
        out_dir / "influence.json",
        {
            **tbl.meta,
            "shape": list(tbl.scores.shape),
            "psi_shape": None if tbl.psi is None else list(tbl.psi.shape),
            "dtype": "<f8",
            "layout": "row-major (anchor, user, global training index)",
        },
    )


def load_influence_table(in_dir) -> InfluenceTable:
    in_dir = Path(in_dir)
    head = _io.read_json(in_dir / "influence.json")
    scores = np.frombuffer((in_dir / "scores.f64").read_bytes(), dtype="<f8").reshape(head["shape"]).copy()
    psi = None
    if head.get("psi_shape"):
        psi = np.frombuffer((in_dir / "psi.f64").read_bytes(), dtype="<f8").reshape(head["psi_shape"]).copy()
    meta = {k: v for k, v in head.items() if k not in ("shape", "psi_shape", "dtype", "layout")}
    return InfluenceTable(scores, psi, meta)


def dense_hessian(m: FactorModel, d: Dataset, mask, damping: float = 0.0) -> np.ndarray:
    """Explicit ``H + damping I`` built column by column; small models only."""
    mask = np.asarray(mask, dtype=float)
    sel = np.flatnonzero(mask)
    P = m.n_params
    if P > 5000:
        raise ValueError(f"refusing to form a dense {P}x{P} Hessian")
    H = damping * np.eye(P)
    if sel.size:
        H += batch_hvp(m, train_samples(d, sel), np.eye(P), mask[sel], _l2(m)) / d.Z
    return 0.5 * (H + H.T)


__all__ = [
    "AnchorSet",
    "InfluenceTable",
    "LissaConfig",
    "anchor_distances",
    "anchor_error_bound",
    "approx_validation_loss",
    "approx_validation_losses",
    "build_anchor_set",
    "build_influence_table",
    "dense_hessian",
    "draw_anchor",
    "draw_anchor_masks",
    "lissa_ihvp",
    "load_anchor_set",
    "load_influence_table",
    "nearest_anchor",
    "save_anchor_set",
    "save_influence_table",
    "suggest_scale",
    "top_eigenvalue",
    "validation_gradients",
]
