"""Dot-product matrix factorization trained with binary cross-entropy.

A training sample is a positive (user, item) pair together with its frozen
negatives. Its loss is

    l(s) = softplus(-e_u . e_i) + sum_j softplus(e_u . e_j)

which equals -log sigmoid(e_u . e_i) - sum_j log(1 - sigmoid(e_u . e_j)).

All flat parameter vectors use the canonical ordering: the user embedding
matrix raveled row-major, followed by the item embedding matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.special import expit

from . import _io
from .data import Dataset
from .errors import ConfigError, DataError, DegenerateSelectionError, NumericalError


@dataclass(frozen=True)
class TrainerConfig:
    """Mini-batch SGD settings.

    ``learning_rate`` multiplies the batch-summed sample gradients, i.e. it is
    a per-sample step size. ``l2`` is the per-sample ridge coefficient (see
    ``batch_losses``); batches at least as large as the selection give
    deterministic full-batch descent.
    """

    learning_rate: float = 0.01
    batch_size: int = 2048
    epochs: int = 50
    seed: int = 0
    tol: float = 0.0
    dim: int = 64
    l2: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.dim < 1:
            raise ConfigError("batch_size and dim must be >= 1")
        if self.l2 < 0 or self.tol < 0:
            raise ConfigError("l2 and tol must be non-negative")


@dataclass(frozen=True)
class FactorModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2 or self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError("embedding matrices must be 2-D with matching width")
        if self.user_emb.shape[1] < 1:
            raise ValueError("embedding dim must be >= 1")

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def n_params(self) -> int:
        return self.user_emb.size + self.item_emb.size

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.user_emb.ravel(), self.item_emb.ravel()])

    def split(self, vec):
        """View a flat vector as (user block, item block)."""
        k = self.user_emb.size
        return vec[:k].reshape(self.user_emb.shape), vec[k:].reshape(self.item_emb.shape)

    def with_theta(self, theta, **meta) -> FactorModel:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.n_params},)")
        U, V = self.split(theta.copy())
        return FactorModel(U, V, {**self.meta, **meta})

    @classmethod
    def init(cls, n_users, n_items, dim, seed=0) -> FactorModel:
        rng = np.random.default_rng(seed)
        std = 0.1 / math.sqrt(dim)
        U = rng.normal(0.0, std, size=(n_users, dim))
        V = rng.normal(0.0, std, size=(n_items, dim))
        return cls(U, V, {"init_seed": seed})

    @classmethod
    def zeros(cls, n_users, n_items, dim) -> FactorModel:
        return cls(np.zeros((n_users, dim)), np.zeros((n_items, dim)))


# -- sample bookkeeping -------------------------------------------------------


@dataclass(frozen=True)
class Samples:
    """A batch of BCE samples: positive pairs plus their frozen negatives."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return int(self.users.size)

    def take(self, idx) -> Samples:
        return Samples(self.users[idx], self.pos[idx], self.neg[idx])


def _require_negatives(d: Dataset):
    if d.train_neg is None:
        raise DataError("dataset has no frozen negatives; call freeze_negatives first")


def train_samples(d: Dataset, idx=None) -> Samples:
    _require_negatives(d)
    s = Samples(d.train_users, d.train_items, d.train_neg)
    return s if idx is None else s.take(idx)


def val_samples(d: Dataset, u=None) -> Samples:
    _require_negatives(d)
    s = Samples(d.val_users, d.val_items, d.val_neg)
    return s if u is None else s.take(d.val_slice(u))


def _check_indices(m: FactorModel, s: Samples):
    if s.users.size == 0:
        return
    if s.users.min() < 0 or s.users.max() >= m.n_users:
        raise IndexError("user index out of range")
    lo = min(s.pos.min(), s.neg.min()) if s.neg.size else s.pos.min()
    hi = max(s.pos.max(), s.neg.max()) if s.neg.size else s.pos.max()
    if lo < 0 or hi >= m.n_items:
        raise IndexError("item index out of range")


def _as_samples(user, pos, neg) -> Samples:
    return Samples(np.atleast_1d(np.asarray(user)), np.atleast_1d(np.asarray(pos)), np.atleast_2d(np.asarray(neg)))


def _scatter_rows(out, index, values):
    """``out[index] += values`` with repeated indices accumulated."""
    n, b = out.shape[0], index.size
    inc = sparse.csr_matrix((np.ones(b), (index, np.arange(b))), shape=(n, b))
    out += (inc @ values.reshape(b, -1)).reshape(out.shape)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _scores(m: FactorModel, s: Samples):
    eu = m.user_emb[s.users]
    pos = np.einsum("bd,bd->b", eu, m.item_emb[s.pos])
    neg = np.einsum("bd,brd->br", eu, m.item_emb[s.neg])
    return pos, neg


# -- losses, gradients, curvature ---------------------------------------------


def batch_losses(m: FactorModel, s: Samples, l2: float = 0.0) -> np.ndarray:
    """Per-sample BCE losses.

    With ``l2 > 0`` each sample also carries ``l2/2`` times the squared norms of
    the embedding rows it touches (user, positive item, each negative), so
    dropping a sample drops its share of the regularizer too.
    """
    _check_indices(m, s)
    pos, neg = _scores(m, s)
    out = _softplus(-pos) + _softplus(neg).sum(axis=1)
    if l2:
        sq_u = np.einsum("bd,bd->b", m.user_emb, m.user_emb)
        sq_v = np.einsum("bd,bd->b", m.item_emb, m.item_emb)
        out = out + 0.5 * l2 * (sq_u[s.users] + sq_v[s.pos] + sq_v[s.neg].sum(axis=1))
    return out


def sample_loss(m: FactorModel, user, pos, neg, l2: float = 0.0) -> float:
    return float(batch_losses(m, _as_samples(user, pos, neg), l2)[0])


def batch_grad(m: FactorModel, s: Samples, weights=None, l2: float = 0.0) -> np.ndarray:
    """Flat gradient of ``sum_i w_i * l(s_i)``."""
    _check_indices(m, s)
    w = np.ones(len(s)) if weights is None else np.asarray(weights, dtype=float)
    pos, neg = _scores(m, s)
    dpos = (expit(pos) - 1.0) * w
    dneg = expit(neg) * w[:, None]
    eu = m.user_emb[s.users]
    gU = np.zeros_like(m.user_emb)
    gV = np.zeros_like(m.item_emb)
    _scatter_rows(gU, s.users, dpos[:, None] * m.item_emb[s.pos] + np.einsum("br,brd->bd", dneg, m.item_emb[s.neg]))
    _scatter_rows(gV, s.pos, dpos[:, None] * eu)
    _scatter_rows(gV, s.neg.ravel(), (dneg[:, :, None] * eu[:, None, :]).reshape(-1, m.dim))
    if l2:
        gU += l2 * np.bincount(s.users, weights=w, minlength=m.n_users)[:, None] * m.user_emb
        touches = np.bincount(s.pos, weights=w, minlength=m.n_items)
        touches += np.bincount(s.neg.ravel(), weights=np.repeat(w, s.neg.shape[1]), minlength=m.n_items)
        gV += l2 * touches[:, None] * m.item_emb
    return np.concatenate([gU.ravel(), gV.ravel()])


def sample_grad(m: FactorModel, user, pos, neg, l2: float = 0.0) -> np.ndarray:
    return batch_grad(m, _as_samples(user, pos, neg), l2=l2)


def _as_columns(m: FactorModel, vec):
    """Split a (P,) or (P, K) array into (n_users*dim, K) and (n_items*dim, K) blocks."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape[0] != m.n_params:
        raise ValueError(f"vector has leading size {vec.shape[0]}, expected {m.n_params}")
    mat = vec.reshape(m.n_params, -1)
    k = m.user_emb.size
    return mat[:k], mat[k:]


@dataclass(frozen=True)
class _Pairs:
    """Every (user, item) pair of a sample batch with sparse design matrices.

    ``X @ vU`` gives ``e_i . vU[u]`` per pair and ``Y @ vV`` gives
    ``e_u . vV[i]``, where vU, vV are flat embedding-shaped blocks.
    """

    users: np.ndarray
    items: np.ndarray
    score: np.ndarray
    X: sparse.csr_matrix
    Y: sparse.csr_matrix


def _pairs(m: FactorModel, s: Samples) -> _Pairs:
    r = 1 + s.neg.shape[1]
    users = np.repeat(s.users, r)
    items = np.concatenate([s.pos[:, None], s.neg], axis=1).ravel()
    eu, ev = m.user_emb[users], m.item_emb[items]
    b, dim = users.size, m.dim
    rows = np.repeat(np.arange(b), dim)
    offs = np.arange(dim)
    X = sparse.csr_matrix((ev.ravel(), (rows, (users[:, None] * dim + offs).ravel())), shape=(b, m.n_users * dim))
    Y = sparse.csr_matrix((eu.ravel(), (rows, (items[:, None] * dim + offs).ravel())), shape=(b, m.n_items * dim))
    return _Pairs(users, items, np.einsum("bd,bd->b", eu, ev), X, Y)


def grad_dots(m: FactorModel, s: Samples, vec, l2: float = 0.0) -> np.ndarray:
    """``vec . grad l(s_i)`` for every sample, without forming the gradients.

    ``vec`` may be (P,) giving shape (n,), or (P, K) giving shape (K, n).
    """
    _check_indices(m, s)
    pU, pV = _as_columns(m, vec)
    pr = _pairs(m, s)
    r = 1 + s.neg.shape[1]
    sign = np.zeros((len(s), r))
    sign[:, 0] = 1.0
    d1 = expit(pr.score) - sign.ravel()
    # a pair (u, j) contributes phi'(s) * (pU[u] . V[j] + pV[j] . U[u])
    per_pair = d1[:, None] * (pr.X @ pU + pr.Y @ pV)
    out = per_pair.reshape(len(s), r, -1).sum(axis=1)
    if l2:
        K = pU.shape[1]
        uu = np.einsum("udk,ud->uk", pU.reshape(m.n_users, m.dim, K), m.user_emb)
        vv = np.einsum("idk,id->ik", pV.reshape(m.n_items, m.dim, K), m.item_emb)
        out = out + l2 * (uu[s.users] + vv[pr.items].reshape(len(s), r, K).sum(axis=1))
    return out[:, 0] if np.ndim(vec) == 1 else out.T


def batch_hvp(m: FactorModel, s: Samples, v, weights=None, l2: float = 0.0) -> np.ndarray:
    """``(sum_i w_i * Hessian l(s_i)) v`` computed analytically per pair.

    ``v`` may be a single (P,) vector or a (P, K) block of vectors.
    """
    _check_indices(m, s)
    w = np.ones(len(s)) if weights is None else np.asarray(weights, dtype=float)
    vU, vV = _as_columns(m, v)
    K = vU.shape[1]
    pr = _pairs(m, s)
    r = 1 + s.neg.shape[1]
    sign = np.zeros((len(s), r))
    sign[:, 0] = 1.0
    ww = np.repeat(w, r)
    sig = expit(pr.score)
    d1 = (sig - sign.ravel()) * ww  # first derivative of the pair loss
    d2 = sig * (1.0 - sig) * ww  # second derivative, same for both signs

    ds = pr.X @ vU + pr.Y @ vV  # directional derivative of each pair score
    c = d2[:, None] * ds
    A = sparse.csr_matrix((d1, (pr.users, pr.items)), shape=(m.n_users, m.n_items))
    outU = pr.X.T @ c + (A @ vV.reshape(m.n_items, -1)).reshape(-1, K)
    outV = pr.Y.T @ c + (A.T @ vU.reshape(m.n_users, -1)).reshape(-1, K)
    if l2:
        cu = np.bincount(s.users, weights=w, minlength=m.n_users)  # once per sample
        ci = np.bincount(pr.items, weights=ww, minlength=m.n_items)
        outU += l2 * np.repeat(cu, m.dim)[:, None] * vU
        outV += l2 * np.repeat(ci, m.dim)[:, None] * vV
    out = np.concatenate([outU, outV])
    return out[:, 0] if np.ndim(v) == 1 else out


def hvp(m: FactorModel, d: Dataset, mask, v, damping: float = 0.01, l2: float = 0.0) -> np.ndarray:
    """``(H + damping I) v`` with ``H = (1/Z) sum_i mask_i Hessian l(s_i)``.

    ``mask=None`` selects every training sample. Z is the dataset's total
    training count, independent of the mask. ``l2`` must match the value the
    model was trained with for H to be the training-objective Hessian.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[0] != m.n_params:
        raise ValueError(f"vector has shape {v.shape}, expected ({m.n_params},)")
    mask = np.ones(d.Z) if mask is None else np.asarray(mask, dtype=float)
    if mask.shape != (d.Z,):
        raise ValueError(f"mask has shape {mask.shape}, expected ({d.Z},)")
    sel = np.flatnonzero(mask)
    out = damping * v
    if sel.size:
        out = out + batch_hvp(m, train_samples(d, sel), v, mask[sel], l2) / d.Z
    return out


# -- objective and training ---------------------------------------------------


def objective(m: FactorModel, d: Dataset, mask=None, l2: float = 0.0) -> float:
    """``(1/Z) sum_i mask_i l(s_i)`` with Z the dataset's training count."""
    mask = np.ones(d.Z) if mask is None else np.asarray(mask, dtype=float)
    sel = np.flatnonzero(mask)
    if not sel.size:
        return 0.0
    return float(np.dot(batch_losses(m, train_samples(d, sel), l2), mask[sel])) / d.Z


def objective_grad(m: FactorModel, d: Dataset, mask=None, l2: float = 0.0) -> np.ndarray:
    mask = np.ones(d.Z) if mask is None else np.asarray(mask, dtype=float)
    sel = np.flatnonzero(mask)
    if not sel.size:
        return np.zeros(m.n_params)
    return batch_grad(m, train_samples(d, sel), mask[sel], l2) / d.Z


def train_masked(d: Dataset, mask, cfg: TrainerConfig, init: FactorModel | None = None) -> FactorModel:
    """Fit the model on the samples selected by ``mask`` with mini-batch SGD.

    Stops after ``cfg.epochs`` or once the full objective gradient norm drops
    to ``cfg.tol``. The per-epoch objective trace and final gradient norm are
    stored in ``meta``.
    """
    mask = np.ones(d.Z, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (d.Z,):
        raise ValueError(f"mask has shape {mask.shape}, expected ({d.Z},)")
    sel = np.flatnonzero(mask)
    if sel.size == 0:
        raise DegenerateSelectionError("selection mask is empty; nothing to train on")
    samples = train_samples(d)
    rng = np.random.default_rng(cfg.seed)
    m = init if init is not None else FactorModel.init(d.n_users, d.n_items, cfg.dim, seed=cfg.seed)
    theta = m.theta

    full = cfg.batch_size >= sel.size
    weights = np.ones(sel.size)
    sel_samples = samples.take(sel)

    def full_grad(m):
        return batch_grad(m, sel_samples, weights, cfg.l2)  # = Z * objective gradient

    def full_loss(m):
        return float(batch_losses(m, sel_samples, cfg.l2).sum()) / d.Z

    trace = [full_loss(m)]
    g = full_grad(m)
    grad_norm = float(np.linalg.norm(g)) / d.Z
    epochs_run = 0
    for _ in range(cfg.epochs):
        if grad_norm <= cfg.tol:
            break
        if full:
            # one batch holding every selected sample: reuse the gradient
            theta = theta - cfg.learning_rate * g
            m = m.with_theta(theta)
        else:
            order = sel[rng.permutation(sel.size)]
            for start in range(0, order.size, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                step = (sel.size / batch.size) * batch_grad(m, samples.take(batch), l2=cfg.l2)
                theta = theta - cfg.learning_rate * step
                m = m.with_theta(theta)
        epochs_run += 1
        trace.append(full_loss(m))
        if not np.isfinite(trace[-1]):
            raise NumericalError("training diverged; lower the learning rate")
        g = full_grad(m)
        grad_norm = float(np.linalg.norm(g)) / d.Z

    return FactorModel(
        m.user_emb,
        m.item_emb,
        {
            "seed": cfg.seed,
            "epochs_run": epochs_run,
            "loss_trace": trace,
            "grad_norm": grad_norm,
            "normalizer": d.Z,
            "n_selected": int(sel.size),
            "l2": cfg.l2,
        },
    )


# -- evaluation helpers -------------------------------------------------------


def validation_loss(m: FactorModel, d: Dataset, u: int) -> float:
    """Sum of sample losses over the user's validation set."""
    if d.val_offsets[u + 1] == d.val_offsets[u]:
        raise ValueError(f"user {u} has an empty validation set")
    return float(batch_losses(m, val_samples(d, u)).sum())


def validation_losses(m: FactorModel, d: Dataset) -> np.ndarray:
    """Per-user validation losses for all users at once."""
    losses = batch_losses(m, val_samples(d))
    return np.bincount(d.val_users, weights=losses, minlength=d.n_users)


def recommend_topk(m: FactorModel, d: Dataset, u: int, k: int = 5) -> np.ndarray:
    """Top-k unseen items by score; ties go to the smaller item id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = m.item_emb @ m.user_emb[u]
    allowed = np.ones(d.n_items, dtype=bool)
    allowed[d.S(u)] = False
    allowed[d.T(u)] = False
    cand = np.flatnonzero(allowed)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


# -- checkpoints --------------------------------------------------------------


def save_model(m: FactorModel, path, **header):
    """Write ``<path>.json`` (header) and ``<path>.f64`` (little-endian params)."""
    path = Path(path)
    head = {
        "n_users": m.n_users,
        "n_items": m.n_items,
        "dim": m.dim,
        "dtype": "<f8",
        "seed": m.meta.get("seed"),
        "grad_norm": m.meta.get("grad_norm"),
        "l2": m.meta.get("l2", 0.0),
        **header,
    }
    _io.atomic_write_bytes(path.with_suffix(".f64"), m.theta.astype("<f8").tobytes())
    _io.atomic_write_text(path.with_suffix(".json"), json.dumps(head, indent=2, sort_keys=True) + "\n")


def load_model(path) -> FactorModel:
    path = Path(path)
    head = _io.read_json(path.with_suffix(".json"))
    theta = np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype="<f8").astype(float)
    m = FactorModel.zeros(head["n_users"], head["n_items"], head["dim"])
    return m.with_theta(theta, **{k: v for k, v in head.items() if k not in ("n_users", "n_items", "dim", "dtype")})


def with_meta(m: FactorModel, **meta) -> FactorModel:
    return replace(m, meta={**m.meta, **meta})
