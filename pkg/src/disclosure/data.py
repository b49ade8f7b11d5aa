"""Interaction data: simulation, CSV ingestion, splitting, willingness and negatives.

Training interactions are stored flat. User ``u`` owns the global training
indices ``train_offsets[u]:train_offsets[u + 1]``, and every per-interaction
array (willingness, frozen negatives, selection masks) is aligned with that
flat ordering.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from . import _io
from .errors import ConfigError, DataError, EmptyDatasetError, NegativeExhaustionError, ParseError

logger = logging.getLogger(__name__)

TEST_FRACTION = 0.2
VAL_FRACTION = 0.1
MIN_INTERACTIONS = 3


@dataclass(frozen=True)
class SimulationConfig:
    """Parameters of the synthetic interaction/willingness generator.

    User feature coordinates are drawn from N(+feature_mean, feature_std^2) and
    item coordinates from N(-feature_mean, feature_std^2). The defaults put the
    interaction density at roughly 0.6% for ``eta=0.5`` and 1000x1000.
    """

    n_users: int = 1000
    n_items: int = 1000
    feature_dim: int = 4
    eta: float = 0.5
    a1: float = 0.5
    a2: float = 1.0
    a3: float = 1.0
    seed: int = 0
    feature_mean: float = 2.9
    feature_std: float = 1.8

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1 or self.feature_dim < 1:
            raise ConfigError("n_users, n_items and feature_dim must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.a1 > self.a2:
            raise ConfigError(f"a1 ({self.a1}) must not exceed a2 ({self.a2})")
        if not self.a3 > 0:
            raise ConfigError(f"a3 must be positive, got {self.a3}")
        if not self.feature_std > 0:
            raise ConfigError("feature_std must be positive")


@dataclass(frozen=True)
class Interactions:
    """Unsplit (user, item[, beta]) interaction log with dense ids."""

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    beta: np.ndarray | None = None
    user_labels: tuple | None = None
    item_labels: tuple | None = None
    user_features: np.ndarray | None = None
    item_features: np.ndarray | None = None

    @property
    def n_interactions(self) -> int:
        return int(self.users.size)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.n_interactions / (self.n_users * self.n_items)


def _offsets(counts):
    out = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=out[1:])
    return out


@dataclass(frozen=True)
class Dataset:
    n_users: int
    n_items: int
    train_offsets: np.ndarray
    train_items: np.ndarray
    val_offsets: np.ndarray
    val_items: np.ndarray
    test_offsets: np.ndarray
    test_items: np.ndarray
    beta: np.ndarray | None = None
    train_neg: np.ndarray | None = None
    val_neg: np.ndarray | None = None
    user_labels: tuple | None = None
    item_labels: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # derived index arrays, cached once
        object.__setattr__(
            self, "train_users", np.repeat(np.arange(self.n_users), np.diff(self.train_offsets))
        )
        object.__setattr__(
            self, "val_users", np.repeat(np.arange(self.n_users), np.diff(self.val_offsets))
        )

    @property
    def Z(self) -> int:
        """Total number of training interactions, fixed regardless of any mask."""
        return int(self.train_items.size)

    @property
    def n_val(self) -> int:
        return int(self.val_items.size)

    @property
    def neg_ratio(self) -> int:
        return 0 if self.train_neg is None else int(self.train_neg.shape[1])

    def train_slice(self, u) -> slice:
        return slice(int(self.train_offsets[u]), int(self.train_offsets[u + 1]))

    def val_slice(self, u) -> slice:
        return slice(int(self.val_offsets[u]), int(self.val_offsets[u + 1]))

    def train_count(self, u) -> int:
        return int(self.train_offsets[u + 1] - self.train_offsets[u])

    def S(self, u):
        return self.train_items[self.train_slice(u)]

    def T(self, u):
        return self.val_items[self.val_slice(u)]

    def D(self, u):
        return self.test_items[self.test_offsets[u] : self.test_offsets[u + 1]]

    def user_beta(self, u):
        return self.beta[self.train_slice(u)]

    def known_items(self, u):
        """Items the user interacted with in any split."""
        return np.concatenate([self.S(u), self.T(u), self.D(u)])

    def replace(self, **changes) -> Dataset:
        return dataclasses.replace(self, **changes)

    def validate(self):
        """Assert the structural invariants; raises DataError on violation."""
        for u in range(self.n_users):
            s, t, d = set(self.S(u).tolist()), set(self.T(u).tolist()), set(self.D(u).tolist())
            if s & t or s & d or t & d:
                raise DataError(f"user {u}: train/validation/test sets overlap")
            if self.train_neg is not None:
                negs = set(self.train_neg[self.train_slice(u)].ravel().tolist())
                negs |= set(self.val_neg[self.val_slice(u)].ravel().tolist())
                if negs & (s | t | d):
                    raise DataError(f"user {u}: a frozen negative is a known interaction")
        if self.beta is not None:
            if self.beta.shape != (self.Z,):
                raise DataError("willingness vector misaligned with training interactions")
            if np.any(self.beta < 0) or np.any(self.beta > 1):
                raise DataError("willingness values must lie in [0, 1]")
        return self


# -- simulation ---------------------------------------------------------------


def simulate_dataset(cfg: SimulationConfig) -> Interactions:
    """Generate interactions by thresholding sigmoid(e_u . e_v) at ``eta``.

    Willingness for each interacting pair is sigmoid(s_u * g([e_u; e_v]) + b_u)
    with s_u ~ U[a1, a2], b_u ~ N(0, a3) and ``g`` a random affine map.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.feature_dim
    eu = rng.normal(cfg.feature_mean, cfg.feature_std, size=(cfg.n_users, k))
    ev = rng.normal(-cfg.feature_mean, cfg.feature_std, size=(cfg.n_items, k))
    g_w = rng.normal(0.0, 1.0, size=2 * k)
    g_b = rng.normal(0.0, 1.0)
    s_u = rng.uniform(cfg.a1, cfg.a2, size=cfg.n_users)
    b_u = rng.normal(0.0, cfg.a3, size=cfg.n_users)

    # sigmoid(x) >= eta  <=>  x >= logit(eta); exact at eta in {0, 1}
    with np.errstate(divide="ignore"):
        cut = logit(cfg.eta)
    users, items = np.nonzero(eu @ ev.T >= cut)

    g = eu[users] @ g_w[:k] + ev[items] @ g_w[k:] + g_b
    beta = expit(s_u[users] * g + b_u[users])
    return Interactions(
        n_users=cfg.n_users,
        n_items=cfg.n_items,
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        beta=beta,
        user_features=eu,
        item_features=ev,
    )


# -- ingestion ----------------------------------------------------------------


def ingest_interactions(path) -> Interactions:
    """Read a ``user_id,item_id[,beta]`` CSV with a header row.

    Ids are arbitrary labels remapped to dense indices in order of first
    appearance. Duplicate (user, item) rows keep their first occurrence.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError(f"{path}: file is empty")
        header = [h.strip().lower() for h in header]
        if header not in (["user_id", "item_id"], ["user_id", "item_id", "beta"]):
            raise ParseError(f"expected header 'user_id,item_id[,beta]', got {','.join(header)!r}", line=1)
        has_beta = len(header) == 3

        umap, imap = {}, {}
        seen = set()
        users, items, betas = [], [], []
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}: {','.join(row)!r}", line=lineno
                )
            uid, iid = row[0].strip(), row[1].strip()
            if not uid or not iid:
                raise ParseError(f"empty id in row {','.join(row)!r}", line=lineno)
            b = None
            if has_beta:
                try:
                    b = float(row[2])
                except ValueError:
                    raise ParseError(f"beta is not a number: {row[2]!r}", line=lineno) from None
                if not 0.0 <= b <= 1.0:
                    raise ParseError(f"beta {b} outside [0, 1]", line=lineno)
            u = umap.setdefault(uid, len(umap))
            i = imap.setdefault(iid, len(imap))
            if (u, i) in seen:
                continue
            seen.add((u, i))
            users.append(u)
            items.append(i)
            betas.append(b)

    if not users:
        raise EmptyDatasetError(f"{path}: no interactions")
    return Interactions(
        n_users=len(umap),
        n_items=len(imap),
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        beta=np.asarray(betas, dtype=float) if has_beta else None,
        user_labels=tuple(umap),
        item_labels=tuple(imap),
    )


# -- splitting ----------------------------------------------------------------


def split_sizes(n: int) -> tuple[int, int, int]:
    """(test, validation, train) counts for a user with ``n`` interactions."""
    n_test = max(1, int(np.floor(TEST_FRACTION * n)))
    n_val = max(1, int(np.floor(VAL_FRACTION * n)))
    return n_test, n_val, n - n_test - n_val


def split_dataset(inter: Interactions, seed: int = 0) -> Dataset:
    """Random per-user 20% test / 10% validation / rest training split.

    Users with fewer than three interactions are dropped and the remaining
    users renumbered densely. Each split is stored in ascending item order.
    """
    rng = np.random.default_rng(seed)
    order = np.lexsort((inter.items, inter.users))
    users, items = inter.users[order], inter.items[order]
    beta = None if inter.beta is None else inter.beta[order]
    bounds = _offsets(np.bincount(users, minlength=inter.n_users))

    tr_i, tr_b, va_i, te_i = [], [], [], []
    tr_c, va_c, te_c = [], [], []
    kept = []
    for u in range(inter.n_users):
        lo, hi = bounds[u], bounds[u + 1]
        n = hi - lo
        if n < MIN_INTERACTIONS:
            continue
        kept.append(u)
        n_test, n_val, n_train = split_sizes(n)
        perm = lo + rng.permutation(n)
        test, val, train = perm[:n_test], perm[n_test : n_test + n_val], perm[n_test + n_val :]
        train = train[np.argsort(items[train], kind="stable")]
        tr_i.append(items[train])
        if beta is not None:
            tr_b.append(beta[train])
        va_i.append(np.sort(items[val]))
        te_i.append(np.sort(items[test]))
        tr_c.append(n_train)
        va_c.append(n_val)
        te_c.append(n_test)

    dropped = inter.n_users - len(kept)
    if dropped:
        logger.warning("dropped %d users with fewer than %d interactions", dropped, MIN_INTERACTIONS)
    if not kept:
        raise EmptyDatasetError("no user has enough interactions to split")

    cat = lambda xs: np.concatenate(xs).astype(np.int64)  # noqa: E731
    labels = None
    if inter.user_labels is not None:
        labels = tuple(inter.user_labels[u] for u in kept)
    return Dataset(
        n_users=len(kept),
        n_items=inter.n_items,
        train_offsets=_offsets(tr_c),
        train_items=cat(tr_i),
        val_offsets=_offsets(va_c),
        val_items=cat(va_i),
        test_offsets=_offsets(te_c),
        test_items=cat(te_i),
        beta=np.concatenate(tr_b) if beta is not None else None,
        user_labels=labels,
        item_labels=inter.item_labels,
        meta={"split_seed": seed, "dropped_users": dropped, "kept_users": kept},
    )


def assign_random_willingness(d: Dataset, seed: int = 0) -> Dataset:
    """Replace the willingness vectors with i.i.d. Uniform[0, 1] draws."""
    beta = np.random.default_rng(seed).uniform(0.0, 1.0, size=d.Z)
    return d.replace(beta=beta, meta={**d.meta, "willingness_seed": seed})


def freeze_negatives(d: Dataset, ratio: int = 1, seed: int = 0) -> Dataset:
    """Draw ``ratio`` negatives per training and per validation sample, once.

    Negatives are uniform over items the user never interacted with.
    """
    if ratio < 1:
        raise ConfigError(f"negative ratio must be >= 1, got {ratio}")
    rng = np.random.default_rng(seed)
    train_neg = np.empty((d.Z, ratio), dtype=np.int64)
    val_neg = np.empty((d.n_val, ratio), dtype=np.int64)
    everything = np.arange(d.n_items)
    for u in range(d.n_users):
        pool = np.setdiff1d(everything, d.known_items(u), assume_unique=False)
        if pool.size == 0:
            raise NegativeExhaustionError(f"user {u} interacted with every item; no negatives left")
        ts, vs = d.train_slice(u), d.val_slice(u)
        train_neg[ts] = rng.choice(pool, size=(ts.stop - ts.start, ratio))
        val_neg[vs] = rng.choice(pool, size=(vs.stop - vs.start, ratio))
    return d.replace(train_neg=train_neg, val_neg=val_neg, meta={**d.meta, "negative_seed": seed, "neg_ratio": ratio})


def build_dataset(inter: Interactions, seed: int = 0, neg_ratio: int = 1) -> Dataset:
    """Split, fill missing willingness, freeze negatives; one seed drives all three."""
    ss = np.random.SeedSequence(seed)
    s_split, s_will, s_neg = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    d = split_dataset(inter, seed=s_split)
    if d.beta is None:
        d = assign_random_willingness(d, seed=s_will)
    d = freeze_negatives(d, ratio=neg_ratio, seed=s_neg)
    return d.replace(meta={**d.meta, "seed": seed}).validate()


# -- persistence --------------------------------------------------------------


def save_dataset(d: Dataset, out_dir, extra_manifest=None):
    """Write CSV shards plus ``manifest.json`` (written last)."""
    out = Path(out_dir)
    f = _io.fmt_float
    tr_users = d.train_users
    _io.write_csv(
        out / "train.csv",
        ["user", "item", "beta"],
        [(int(u), int(i), f(b)) for u, i, b in zip(tr_users, d.train_items, d.beta)],
    )
    _io.write_csv(out / "val.csv", ["user", "item"], zip(d.val_users.tolist(), d.val_items.tolist()))
    te_users = np.repeat(np.arange(d.n_users), np.diff(d.test_offsets))
    _io.write_csv(out / "test.csv", ["user", "item"], zip(te_users.tolist(), d.test_items.tolist()))
    r = d.neg_ratio
    neg_header = ["index"] + [f"neg_{j}" for j in range(r)]
    if r:
        _io.write_csv(out / "train_negatives.csv", neg_header, ([k, *row] for k, row in enumerate(d.train_neg.tolist())))
        _io.write_csv(out / "val_negatives.csv", neg_header, ([k, *row] for k, row in enumerate(d.val_neg.tolist())))
    manifest = {
        "n_users": d.n_users,
        "n_items": d.n_items,
        "n_train": d.Z,
        "n_val": d.n_val,
        "n_test": int(d.test_items.size),
        "n_interactions": d.Z + d.n_val + int(d.test_items.size),
        "neg_ratio": r,
        "seeds": {k: v for k, v in d.meta.items() if k.endswith("seed")},
        "dropped_users": d.meta.get("dropped_users", 0),
        "user_labels": list(d.user_labels) if d.user_labels is not None else None,
        "item_labels": list(d.item_labels) if d.item_labels is not None else None,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    _io.write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    if not (src / "manifest.json").exists():
        raise DataError(f"{src}: no dataset manifest.json found")
    man = _io.read_json(src / "manifest.json")
    n_users = man["n_users"]

    def grouped(name, with_beta=False):
        _, rows = _io.read_csv(src / name)
        users = np.array([int(r[0]) for r in rows], dtype=np.int64)
        items = np.array([int(r[1]) for r in rows], dtype=np.int64)
        b = np.array([float(r[2]) for r in rows]) if with_beta else None
        return _offsets(np.bincount(users, minlength=n_users)), items, b

    tr_off, tr_items, beta = grouped("train.csv", with_beta=True)
    va_off, va_items, _ = grouped("val.csv")
    te_off, te_items, _ = grouped("test.csv")
    train_neg = val_neg = None
    if man.get("neg_ratio"):
        train_neg = np.array([[int(x) for x in r[1:]] for r in _io.read_csv(src / "train_negatives.csv")[1]], dtype=np.int64)
        val_neg = np.array([[int(x) for x in r[1:]] for r in _io.read_csv(src / "val_negatives.csv")[1]], dtype=np.int64)
        train_neg = train_neg.reshape(tr_items.size, man["neg_ratio"])
        val_neg = val_neg.reshape(va_items.size, man["neg_ratio"])
    labels = man.get("user_labels")
    ilabels = man.get("item_labels")
    return Dataset(
        n_users=n_users,
        n_items=man["n_items"],
        train_offsets=tr_off,
        train_items=tr_items,
        val_offsets=va_off,
        val_items=va_items,
        test_offsets=te_off,
        test_items=te_items,
        beta=beta,
        train_neg=train_neg,
        val_neg=val_neg,
        user_labels=tuple(labels) if labels is not None else None,
        item_labels=tuple(ilabels) if ilabels is not None else None,
        meta=dict(man.get("seeds", {})),
    ).validate()
