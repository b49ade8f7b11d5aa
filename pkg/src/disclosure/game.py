"""Mixed strategies over selection vectors and the best-response solver.

Each user ``u`` holds a distribution over binary masks of their own training
interactions. The payoff of a joint draw ``o`` under its nearest anchor ``t``
is

    B(o, t) = -anchor_loss[t, u] + (1/Z) sum_v o^v . scores[t, u, slice_v]
              - lam * o^u . beta^u

A user's strategy is improved by projected stochastic gradient ascent on the
simplex with opponents frozen, and users are swept round-robin until the
strategies stop moving.

Supports are stored as boolean matrices (one row per selection vector); when
fully enumerated, row ``k`` is the little-endian bit pattern of ``k`` (bit 0
is the user's first training interaction).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _io
from .data import Dataset
from .errors import ConfigError, EnumerationInfeasibleError
from .influence import AnchorSet, InfluenceTable

log = logging.getLogger(__name__)

ESTIMATORS = ("one-hot", "importance-weighted")
MAX_JOINT = 1 << 20


def bits_of(k: int, n: int) -> np.ndarray:
    return np.array([(k >> i) & 1 for i in range(n)], dtype=bool)


def mask_of(bits) -> int:
    return sum(1 << i for i, b in enumerate(bits) if b)


def enumerate_support(n: int) -> np.ndarray:
    codes = np.arange(1 << n)[:, None]
    return ((codes >> np.arange(n)) & 1).astype(bool)


@dataclass(frozen=True)
class Strategy:
    owner: int
    support: np.ndarray  # (K, n) bool, rows distinct
    probs: np.ndarray  # (K,)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        support = np.asarray(self.support, dtype=bool)
        probs = np.asarray(self.probs, dtype=float)
        if support.ndim != 2 or probs.shape != (support.shape[0],):
            raise ValueError("support must be (K, n) with one probability per row")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("strategy probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @property
    def n_bits(self) -> int:
        return self.support.shape[1]

    @property
    def size(self) -> int:
        return self.support.shape[0]

    def marginals(self) -> np.ndarray:
        """Probability that each interaction is disclosed."""
        return self.probs @ self.support

    def expected_count(self) -> float:
        return float(self.marginals().sum())

    def with_probs(self, probs, **meta) -> Strategy:
        return replace(self, probs=np.asarray(probs, dtype=float), meta={**self.meta, **meta})

    def sample(self, rng, size=None):
        return rng.choice(self.size, size=size, p=self.probs)

    def bitmasks(self) -> list[int]:
        return [mask_of(row) for row in self.support]

    @classmethod
    def point_mass(cls, owner: int, bits) -> Strategy:
        return cls(owner, np.asarray(bits, dtype=bool)[None, :], np.ones(1))

    def distinct(self) -> bool:
        return np.unique(self.support, axis=0).shape[0] == self.size


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 1.0
    gamma: float = 0.05
    L: int = 1000
    M: int = 10
    kappa: float = 1e-3
    support_cap: int = 12
    init_mean: float = 0.9
    estimator: str = "one-hot"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.L < 1 or self.M < 1:
            raise ConfigError("L and M must be >= 1")
        if not self.kappa > 0:
            raise ConfigError("kappa must be > 0")
        if not 0 < self.init_mean <= 1:
            raise ConfigError("strategy init mean must lie in (0, 1]")
        if self.support_cap < 1:
            raise ConfigError("support_cap must be >= 1")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")


def _bernoulli_logp(support: np.ndarray, s: float) -> np.ndarray:
    k = support.sum(axis=1)
    n = support.shape[1]
    with np.errstate(divide="ignore"):
        return k * np.log(s) + (n - k) * np.log1p(-s) if s < 1 else np.where(k == n, 0.0, -np.inf)


def init_strategy(u: int, n: int, s: float = 0.9, support_cap: int = 12, seed: int = 0) -> Strategy:
    """Independent Bernoulli(s) bits, enumerated exactly when ``n <= support_cap``.

    Larger users get ``2 * support_cap`` sampled vectors plus the all-ones
    vector (deduplicated), with the Bernoulli probabilities renormalized.
    """
    if n < 1:
        raise ValueError("a strategy needs at least one interaction")
    if n <= support_cap:
        support = enumerate_support(n)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(u,)))
        draws = rng.random((2 * support_cap, n)) < s
        support = np.unique(np.vstack([np.ones((1, n), dtype=bool), draws]), axis=0)
    logp = _bernoulli_logp(support, s)
    p = np.exp(logp - logp.max())
    return Strategy(u, support, p / p.sum(), {"enumerated": n <= support_cap})


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = 1} by sort and threshold."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("projection needs a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("projection input must be finite")
    if np.all(v >= 0) and abs(v.sum() - 1.0) <= 1e-12:
        # already on the simplex up to rounding; returning it makes projection exactly idempotent
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


# -- payoff bookkeeping -------------------------------------------------------


class GameContext:
    """Dataset, anchors and influence table plus per-support caches.

    ``dist[v]`` holds the Hamming distance of each of user v's support rows to
    each anchor's slice (shape (T, K_v)). Supports are fixed for a game, so
    these are computed once.
    """

    def __init__(self, d: Dataset, anchors: AnchorSet, table: InfluenceTable, strategies):
        if table.T != anchors.T:
            raise ValueError("anchor set and influence table disagree on T")
        self.d, self.anchors, self.table = d, anchors, table
        self.Z = d.Z
        self.slices = [d.train_slice(v) for v in range(d.n_users)]
        self.supports = [st.support for st in strategies]
        self.dist = []
        for v, sup in enumerate(self.supports):
            anc = anchors.anchors[:, self.slices[v]]  # (T, n_v)
            self.dist.append(np.count_nonzero(sup[None, :, :] ^ anc[:, None, :], axis=2))

    def lin(self, u: int, v: int) -> np.ndarray:
        """``support_v[k] . scores[t, u, slice_v]`` for every t and k, shape (T, K_v)."""
        return self.table.scores[:, u, self.slices[v]] @ self.supports[v].T.astype(float)

    def penalty(self, u: int, lam: float) -> np.ndarray:
        return lam * (self.supports[u] @ self.d.user_beta(u))

    def joint_mask(self, idx) -> np.ndarray:
        return np.concatenate([self.supports[v][k] for v, k in enumerate(idx)])


def raw_reward(d: Dataset, o, u: int, lam: float, *, anchors=None, table=None, model=None, trainer=None) -> float:
    """``-L(T^u, theta(o)) - lam * o^u . beta^u``.

    The loss term comes from the influence approximation when ``anchors`` and
    ``table`` are given, from ``model`` when it is already trained on ``o``,
    or from retraining on ``o`` with ``trainer``.
    """
    from .influence import approx_validation_loss
    from .recmodel import train_masked, validation_loss

    o = np.asarray(o, dtype=bool)
    if o.shape != (d.Z,):
        raise ValueError(f"selection has shape {o.shape}, expected ({d.Z},)")
    if table is not None:
        loss = approx_validation_loss(table, anchors, o, u)
    else:
        if model is None:
            model = train_masked(d, o, trainer)
        loss = validation_loss(model, d, u)
    return -loss - lam * float(o[d.train_slice(u)] @ d.user_beta(u))


def _joint_indices(sizes, limit=MAX_JOINT) -> np.ndarray:
    total = math.prod(sizes)
    if total > limit:
        raise EnumerationInfeasibleError(f"joint support has {total} elements, limit is {limit}")
    if not sizes:
        return np.zeros((0, 1), dtype=np.int64)
    return np.stack(np.unravel_index(np.arange(total), sizes))


def exact_payoffs(ctx: GameContext, strategies, u: int, lam: float, method: str = "auto") -> np.ndarray:
    """Exact ``g[k] = E_{o^-u}[B(support_u[k], o^-u, t*)]`` for every own row k.

    With one anchor the expectation only needs the opponents' marginals;
    otherwise all opponent combinations are enumerated.
    """
    T = ctx.anchors.T
    own_lin = ctx.lin(u, u)
    pen = ctx.penalty(u, lam)
    loss = ctx.anchors.anchor_loss[:, u]
    others = [v for v in range(len(strategies)) if v != u]
    if method == "auto":
        method = "marginal" if T == 1 else "joint"
    if method == "marginal":
        if T != 1:
            raise ValueError("the marginal form only holds for a single anchor")
        opp = sum(float(strategies[v].marginals() @ ctx.table.scores[0, u, ctx.slices[v]]) for v in others)
        return -loss[0] + (opp + own_lin[0]) / ctx.Z - pen
    combos = _joint_indices([strategies[v].size for v in others])
    n = combos.shape[1]
    p = np.ones(n)
    opp_dist = np.zeros((T, n))
    opp_lin = np.zeros((T, n))
    for row, v in enumerate(others):
        k = combos[row]
        p *= strategies[v].probs[k]
        opp_dist += ctx.dist[v][:, k]
        opp_lin += ctx.lin(u, v)[:, k]
    tot = opp_dist[:, None, :] + ctx.dist[u][:, :, None]  # (T, K_u, n)
    t = np.argmin(tot, axis=0)
    lin = np.take_along_axis(opp_lin[:, None, :] + own_lin[:, :, None], t[None], 0)[0]
    B = -loss[t] + lin / ctx.Z - pen[:, None]
    return B @ p


def expected_reward_exact(ctx: GameContext, strategies, u: int, lam: float, method: str = "auto") -> float:
    """Expected payoff of user u under the current joint strategy."""
    return float(strategies[u].probs @ exact_payoffs(ctx, strategies, u, lam, method))


# -- solver -------------------------------------------------------------------


def _inverse_cdf(probs: np.ndarray, r) -> np.ndarray:
    idx = np.searchsorted(np.cumsum(probs), r, side="right")
    return np.minimum(idx, probs.size - 1)


class _Sampler:
    """Payoff of user u for an own row and a pre-drawn opponent profile."""

    def __init__(self, ctx: GameContext, strategies, u: int, lam: float, L: int, rng, oracle=None):
        self.ctx, self.u, self.oracle = ctx, u, oracle
        T = ctx.anchors.T
        self.own_dist = ctx.dist[u]
        self.own_lin = ctx.lin(u, u)
        self.pen = ctx.penalty(u, lam)
        self.loss = ctx.anchors.anchor_loss[:, u]
        self.opp_idx = {}
        self.opp_dist = np.zeros((T, L))
        self.opp_lin = np.zeros((T, L))
        for v, st in enumerate(strategies):
            if v == u:
                continue
            k = _inverse_cdf(st.probs, rng.random(L))
            self.opp_idx[v] = k
            if oracle is None:
                self.opp_dist += ctx.dist[v][:, k]
                self.opp_lin += ctx.lin(u, v)[:, k]

    def __call__(self, k: int, l: int) -> float:
        if self.oracle is not None:
            idx = [self.opp_idx[v][l] if v != self.u else k for v in range(len(self.ctx.supports))]
            return -self.oracle(self.ctx.joint_mask(idx), self.u) - self.pen[k]
        t = int(np.argmin(self.opp_dist[:, l] + self.own_dist[:, k]))
        return -self.loss[t] + (self.opp_lin[t, l] + self.own_lin[t, k]) / self.ctx.Z - self.pen[k]


def stochastic_gradient(
    ctx: GameContext, strategies, u: int, k: int, lam: float, rng, estimator: str = "one-hot"
) -> tuple[int, float]:
    """One gradient draw for own row ``k``: the nonzero coordinate and its value.

    Opponents are sampled from their strategies. The one-hot value is the
    payoff itself; the importance-weighted value divides by ``alpha_u(k)``.
    """
    value = _Sampler(ctx, strategies, u, lam, 1, rng)(k, 0)
    if estimator == "importance-weighted":
        value /= strategies[u].probs[k]
    return k, value


def projected_ascent(p0, payoff, L: int, gamma: float, rng, estimator: str = "one-hot"):
    """Projected stochastic ascent on a generic payoff ``payoff(k, l)``.

    Returns the average of the first L iterates and the largest norm of the
    one-hot gradient estimate seen.
    """
    p = np.asarray(p0, dtype=float).copy()
    total = np.zeros_like(p)
    G = 0.0
    for l in range(L):
        total += p
        k = int(_inverse_cdf(p, rng.random()))
        value = payoff(k, l)
        if estimator == "importance-weighted":
            value /= p[k]
        G = max(G, abs(value))
        if gamma:
            step = p.copy()
            step[k] += gamma * value
            p = project_simplex(step)
    return project_simplex(total / L), G


def projected_ascent_exact(p0, g, L: int, gamma: float):
    """The same loop driven by the full exact payoff vector ``g``.

    This is the deterministic special case of an unbiased estimator, so
    ``G`` is simply ``|g|_2``.
    """
    g = np.asarray(g, dtype=float)
    p = np.asarray(p0, dtype=float).copy()
    total = np.zeros_like(p)
    for _ in range(L):
        total += p
        p = project_simplex(p + gamma * g)
    return project_simplex(total / L), float(np.linalg.norm(g))


def regret_slack(L: int, gamma: float, G: float) -> float:
    """``1/(L gamma) + gamma^2 G^2``, the gap allowed below the best strategy."""
    return 1.0 / (L * gamma) + gamma**2 * G**2


def solve_user_strategy(ctx: GameContext, strategies, u: int, cfg: SolverConfig, rng=None, oracle=None) -> Strategy:
    """Improve user u's strategy with opponents frozen at ``strategies``."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    payoff = _Sampler(ctx, strategies, u, cfg.lam, cfg.L, rng, oracle)
    avg, G = projected_ascent(strategies[u].probs, payoff, cfg.L, cfg.gamma, rng, cfg.estimator)
    return strategies[u].with_probs(avg, max_grad_norm=G)


@dataclass
class GameState:
    strategies: list
    changes: list = field(default_factory=list)
    sweeps: int = 0
    meta: dict = field(default_factory=dict)


def initial_strategies(d: Dataset, cfg: SolverConfig) -> list:
    return [init_strategy(u, d.train_count(u), cfg.init_mean, cfg.support_cap, cfg.seed) for u in range(d.n_users)]


def best_response_loop(
    d: Dataset,
    anchors: AnchorSet,
    table: InfluenceTable,
    cfg: SolverConfig,
    strategies=None,
    oracle=None,
) -> GameState:
    """Sweep users in ascending order, each responding to the previous sweep.

    Stops after ``cfg.M`` sweeps or once the largest L1 change of any user's
    strategy drops below ``cfg.kappa``. With ``oracle`` (a callable returning
    the true validation loss of user u under a joint mask) payoffs come from
    retraining instead of the influence table.
    """
    strategies = list(strategies) if strategies is not None else initial_strategies(d, cfg)
    ctx = GameContext(d, anchors, table, strategies)
    state = GameState(strategies, meta={"config": cfg.__dict__.copy(), "T": anchors.T})
    start = time.perf_counter()
    for m in range(cfg.M):
        prev = state.strategies
        nxt = []
        for u in range(d.n_users):
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(m, u)))
            nxt.append(solve_user_strategy(ctx, prev, u, cfg, rng, oracle))
        change = max(float(np.abs(a.probs - b.probs).sum()) for a, b in zip(nxt, prev))
        state.strategies = nxt
        state.changes.append(change)
        state.sweeps += 1
        log.info("sweep %d: max strategy change %.3g", m + 1, change)
        if change < cfg.kappa:
            break
    state.meta["seconds"] = time.perf_counter() - start
    return state


def sample_final_selection(strategies, seed: int = 0) -> np.ndarray:
    """Draw one selection vector per user and concatenate them."""
    rng = np.random.default_rng(seed)
    return np.concatenate([st.support[st.sample(rng)] for st in strategies])


def expected_selection(strategies) -> np.ndarray:
    return np.concatenate([st.marginals() for st in strategies])


# -- persistence --------------------------------------------------------------


def strategies_to_json(strategies, meta=None) -> dict:
    return {
        "meta": meta or {},
        "strategies": [
            {"owner": st.owner, "n_bits": st.n_bits, "support": st.bitmasks(), "probs": st.probs.tolist()}
            for st in strategies
        ],
    }


def strategies_from_json(doc) -> list:
    out = []
    for row in doc["strategies"]:
        support = np.array([bits_of(k, row["n_bits"]) for k in row["support"]], dtype=bool).reshape(-1, row["n_bits"])
        probs = np.asarray(row["probs"], dtype=float)
        out.append(Strategy(row["owner"], support, probs / probs.sum()))
    return out


def save_strategies(path, strategies, meta=None):
    _io.write_json(path, strategies_to_json(strategies, meta))


def load_strategies(path) -> list:
    return strategies_from_json(_io.read_json(path))
