import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disclosure.data import (
    Interactions,
    SimulationConfig,
    assign_random_willingness,
    build_dataset,
    freeze_negatives,
    ingest_interactions,
    load_dataset,
    save_dataset,
    simulate_dataset,
    split_dataset,
    split_sizes,
)
from disclosure.errors import (
    ConfigError,
    EmptyDatasetError,
    NegativeExhaustionError,
    ParseError,
)


def _inter(pairs, n_users=None, n_items=None, beta=None):
    users = np.array([p[0] for p in pairs], dtype=np.int64)
    items = np.array([p[1] for p in pairs], dtype=np.int64)
    return Interactions(
        n_users=n_users or int(users.max()) + 1,
        n_items=n_items or int(items.max()) + 1,
        users=users,
        items=items,
        beta=None if beta is None else np.asarray(beta, dtype=float),
    )


def _write(tmp_path, text, name="inter.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# -- simulation ---------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(eta=1.5), dict(eta=-0.1), dict(a1=2.0, a2=1.0), dict(a3=0.0), dict(n_users=0), dict(n_items=0)],
)
def test_simulation_config_rejects_invalid(kwargs):
    with pytest.raises(ConfigError):
        SimulationConfig(**kwargs)


def test_eta_one_gives_no_interactions():
    inter = simulate_dataset(SimulationConfig(n_users=50, n_items=40, eta=1.0))
    assert inter.n_interactions == 0


def test_eta_zero_gives_every_pair():
    inter = simulate_dataset(SimulationConfig(n_users=30, n_items=20, eta=0.0))
    assert inter.n_interactions == 30 * 20


def test_simulation_is_deterministic():
    cfg = SimulationConfig(n_users=60, n_items=60, seed=3, feature_mean=1.0, feature_std=1.0)
    a, b = simulate_dataset(cfg), simulate_dataset(cfg)
    assert np.array_equal(a.users, b.users) and np.array_equal(a.items, b.items)
    assert np.array_equal(a.beta, b.beta)


def test_simulated_willingness_in_unit_interval():
    inter = simulate_dataset(SimulationConfig(n_users=80, n_items=80, feature_mean=0.5, feature_std=1.0))
    assert inter.n_interactions > 0
    assert np.all((inter.beta >= 0) & (inter.beta <= 1))


def test_default_sparsity_matches_reference_count():
    inter = simulate_dataset(SimulationConfig())
    # reference tables list 6184 (and 6148) interactions, i.e. 99.39% sparsity
    assert abs(100 * inter.sparsity - 99.39) <= 0.3


# -- ingestion ----------------------------------------------------------------


def test_ingest_counts(tmp_path):
    inter = ingest_interactions(_write(tmp_path, "user_id,item_id\n0,1\n0,2\n1,1\n"))
    assert (inter.n_users, inter.n_items, inter.n_interactions) == (2, 2, 3)
    assert inter.beta is None


def test_ingest_beta_passthrough(tmp_path):
    inter = ingest_interactions(_write(tmp_path, "user_id,item_id,beta\na,x,0.3\na,y,0.3\nb,x,0.3\n"))
    assert np.all(inter.beta == 0.3)
    assert inter.user_labels == ("a", "b")


def test_ingest_deduplicates(tmp_path):
    inter = ingest_interactions(_write(tmp_path, "user_id,item_id\n0,1\n0,1\n0,2\n"))
    assert inter.n_interactions == 2


def test_ingest_reports_bad_row_line(tmp_path):
    with pytest.raises(ParseError, match="line 3") as info:
        ingest_interactions(_write(tmp_path, "user_id,item_id\n0,1\na,b,c,d\n"))
    assert info.value.line == 3
    assert "a,b,c,d" in str(info.value)


@pytest.mark.parametrize("row", ["0,1,abc", "0,1,1.5", "0,1,-0.1", ",1,0.2"])
def test_ingest_rejects_bad_fields(tmp_path, row):
    with pytest.raises(ParseError):
        ingest_interactions(_write(tmp_path, f"user_id,item_id,beta\n{row}\n"))


def test_ingest_rejects_bad_header(tmp_path):
    with pytest.raises(ParseError, match="line 1"):
        ingest_interactions(_write(tmp_path, "u,i\n0,1\n"))


@pytest.mark.parametrize("text", ["", "user_id,item_id\n"])
def test_ingest_empty(tmp_path, text):
    with pytest.raises(EmptyDatasetError):
        ingest_interactions(_write(tmp_path, text))


# -- splitting ----------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(10, (2, 1, 7)), (3, (1, 1, 1)), (4, (1, 1, 2)), (20, (4, 2, 14))])
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected


def test_user_with_ten_interactions():
    d = split_dataset(_inter([(0, i) for i in range(10)], n_items=12), seed=0)
    assert (d.D(0).size, d.T(0).size, d.S(0).size) == (2, 1, 7)


def test_small_users_dropped():
    pairs = [(0, 0), (0, 1)] + [(1, i) for i in range(3)]
    d = split_dataset(_inter(pairs, n_items=5), seed=0)
    assert d.n_users == 1
    assert d.meta["dropped_users"] == 1
    assert (d.S(0).size, d.T(0).size, d.D(0).size) == (1, 1, 1)


def test_no_user_large_enough():
    with pytest.raises(EmptyDatasetError):
        split_dataset(_inter([(0, 0), (0, 1)], n_items=3))


def test_split_deterministic():
    inter = simulate_dataset(SimulationConfig(n_users=40, n_items=40, feature_mean=0.5, feature_std=1.0))
    a, b = split_dataset(inter, seed=5), split_dataset(inter, seed=5)
    assert np.array_equal(a.train_items, b.train_items) and np.array_equal(a.test_items, b.test_items)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 7), st.integers(0, 14)), min_size=3, max_size=80),
    st.integers(0, 2**16),
)
def test_split_invariants(pairs, seed):
    pairs = sorted(set(pairs))
    counts = np.bincount([p[0] for p in pairs])
    if counts.max() < 3:
        return
    # leave room for negatives: no user may own every item
    d = build_dataset(_inter(pairs, n_users=8, n_items=16), seed=seed)
    assert d.Z == sum(d.S(u).size for u in range(d.n_users))
    for u in range(d.n_users):
        s, t, te = set(d.S(u)), set(d.T(u)), set(d.D(u))
        assert not (s & t or s & te or t & te)
        n = len(s) + len(t) + len(te)
        assert (len(te), len(t), len(s)) == split_sizes(n)
        known = s | t | te
        assert not known & set(d.train_neg[d.train_slice(u)].ravel())
        assert not known & set(d.val_neg[d.val_slice(u)].ravel())
    assert np.all((d.beta >= 0) & (d.beta <= 1)) and d.beta.shape == (d.Z,)


# -- willingness and negatives ------------------------------------------------


def _plain(n_users=20, per_user=10, n_items=60, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [(u, int(i)) for u in range(n_users) for i in rng.choice(n_items, per_user, replace=False)]
    return split_dataset(_inter(pairs, n_users=n_users, n_items=n_items), seed=seed)


def test_random_willingness_deterministic_and_in_range():
    d = _plain()
    a, b = assign_random_willingness(d, 4), assign_random_willingness(d, 4)
    assert np.array_equal(a.beta, b.beta)
    assert np.all((a.beta >= 0) & (a.beta <= 1))


def test_random_willingness_mean():
    d = _plain(n_users=1430, per_user=10, n_items=30)  # 1430 * 7 = 10010 draws
    beta = assign_random_willingness(d, 0).beta
    assert beta.size >= 10_000
    assert 0.48 <= beta.mean() <= 0.52


def test_negatives_count_exclusion_determinism():
    d = assign_random_willingness(_plain(), 1)
    a, b = freeze_negatives(d, 1, seed=2), freeze_negatives(d, 1, seed=2)
    assert a.train_neg.shape == (d.Z, 1)
    assert np.array_equal(a.train_neg, b.train_neg) and np.array_equal(a.val_neg, b.val_neg)
    for u in range(d.n_users):
        assert a.train_neg[a.train_slice(u)].shape[0] == d.S(u).size
        assert not set(a.known_items(u)) & set(a.train_neg[a.train_slice(u)].ravel())


def test_negative_exhaustion():
    d = assign_random_willingness(split_dataset(_inter([(0, i) for i in range(4)], n_items=4)), 0)
    with pytest.raises(NegativeExhaustionError):
        freeze_negatives(d, 1)


def test_negative_ratio_validated():
    with pytest.raises(ConfigError):
        freeze_negatives(_plain(), 0)


# -- persistence --------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    inter = simulate_dataset(SimulationConfig(n_users=30, n_items=30, feature_mean=0.5, feature_std=1.0, seed=2))
    d = build_dataset(inter, seed=2)
    save_dataset(d, tmp_path / "ds")
    e = load_dataset(tmp_path / "ds")
    for name in ("train_offsets", "train_items", "val_items", "test_items", "beta", "train_neg", "val_neg"):
        assert np.array_equal(getattr(d, name), getattr(e, name)), name
    assert e.Z == d.Z


def test_save_is_byte_stable(tmp_path):
    inter = simulate_dataset(SimulationConfig(n_users=30, n_items=30, feature_mean=0.5, feature_std=1.0, seed=2))
    save_dataset(build_dataset(inter, seed=2), tmp_path / "a")
    save_dataset(build_dataset(inter, seed=2), tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
