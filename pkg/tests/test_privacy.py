import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from popsynth import privacy
from popsynth.errors import GeoError, SchemaError
from popsynth.privacy import (
    CounterRng,
    DpConfig,
    error_map,
    geometric_noise,
    geometric_variance,
    perturb_tables,
    rank_correlation,
    smape_per_tract,
    stream_key,
    tract_percentage,
    two_sided_geometric,
)
from popsynth.schema import parse_predicate
from popsynth.tables import CensusTable, TableDefinition

from conftest import make_schema, tract_county

BLACK = "race=black"


def test_variance_closed_form():
    alpha = math.exp(-1)
    assert geometric_variance(1.0) == pytest.approx(2 * alpha / (1 - alpha) ** 2, rel=1e-15)
    # pmf summed numerically
    pmf = [(1 - alpha) / (1 + alpha) * alpha ** abs(z) for z in range(-200, 201)]
    assert sum(pmf) == pytest.approx(1.0, abs=1e-12)
    var = sum(p * z * z for p, z in zip(pmf, range(-200, 201)))
    assert geometric_variance(1.0) == pytest.approx(var, rel=1e-12)
    assert geometric_variance(1.0) == pytest.approx(1.8410, abs=5e-4)


def test_geometric_moments():
    n = 100_000
    keys = stream_key(12345, np.arange(n, dtype=np.uint64))
    z = geometric_noise(1.0, keys)
    var = geometric_variance(1.0)
    assert abs(z.mean()) <= 3 * math.sqrt(var / n)
    assert abs(z.var(ddof=1) - var) <= 0.05 * var


def test_geometric_pmf_shape():
    eps = 0.7
    alpha = math.exp(-eps)
    z = geometric_noise(eps, stream_key(3, np.arange(200_000, dtype=np.uint64)))
    for v in (-2, -1, 0, 1, 2):
        expected = (1 - alpha) / (1 + alpha) * alpha ** abs(v)
        assert np.mean(z == v) == pytest.approx(expected, abs=0.005)


def test_scalar_matches_vectorized():
    rng = CounterRng(9, 4)
    a = [two_sided_geometric(1.0, rng) for _ in range(3)]
    assert rng.counter == 6
    assert a[0] == int(geometric_noise(1.0, stream_key(9, 4)))
    with pytest.raises(ValueError):
        two_sided_geometric(0.0, rng)


def test_counter_rng_unit_interval():
    rng = CounterRng(1)
    u = [rng.random() for _ in range(1000)]
    assert all(0 < v <= 1 for v in u)


def test_large_epsilon_gives_zero_noise():
    z = geometric_noise(50.0, stream_key(1, np.arange(100_000, dtype=np.uint64)))
    assert not z.any()


def test_dp_config_validation():
    with pytest.raises(ValueError):
        DpConfig(epsilon=0)
    with pytest.raises(ValueError):
        DpConfig(runs=0)
    with pytest.raises(ValueError):
        DpConfig(nonnegativity_fix="round")
    with pytest.raises(ValueError):
        DpConfig(seed=-1)


def test_perturb_large_epsilon_identity(toy_county):
    _, _, tables = toy_county
    out = perturb_tables(tables, DpConfig(epsilon=50, runs=1, seed=7), 0)
    for a, b in zip(tables, out):
        np.testing.assert_array_equal(a.values, b.values)


def test_perturb_deterministic_and_run_dependent(toy_county):
    _, _, tables = toy_county
    cfg = DpConfig(epsilon=1, runs=3, seed=7)
    a = perturb_tables(tables, cfg, 1)
    b = perturb_tables(tables, cfg, 1)
    c = perturb_tables(tables, cfg, 2)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert any(not np.array_equal(x.values, y.values) for x, y in zip(a, c))
    with pytest.raises(ValueError):
        perturb_tables(tables, cfg, 3)


def test_perturb_order_independent(toy_county):
    _, _, tables = toy_county
    cfg = DpConfig(epsilon=1, runs=1, seed=11)
    fwd = perturb_tables(tables, cfg, 0)
    rev = perturb_tables(tables[::-1], cfg, 0)[::-1]
    for a, b in zip(fwd, rev):
        np.testing.assert_array_equal(a.values, b.values)
    # a sub-table of blocks sees the same noise in its cells
    t = tables[0]
    sub = CensusTable(t.definition, t.blocks[3:7], t.values[:, 3:7])
    np.testing.assert_array_equal(perturb_tables([sub], cfg, 0)[0].values, fwd[0].values[:, 3:7])


def test_clamp(toy_county):
    _, _, tables = toy_county
    raw = perturb_tables(tables, DpConfig(epsilon=0.5, runs=1, seed=2, nonnegativity_fix="none"), 0)
    clamped = perturb_tables(tables, DpConfig(epsilon=0.5, runs=1, seed=2), 0)
    assert any((r.values < 0).any() for r in raw)
    for r, c in zip(raw, clamped):
        np.testing.assert_array_equal(c.values, np.maximum(r.values, 0))
        assert (c.values >= 0).all()


def test_clamp_zero_cell_negative_noise():
    schema = make_schema(sex=["male", "female"])
    d = TableDefinition("sex", ("sex",), schema)
    t = CensusTable(d, ("390010001001000",), np.zeros((2, 1), dtype=int))
    for seed in range(200):
        raw = perturb_tables([t], DpConfig(runs=1, seed=seed, nonnegativity_fix="none"), 0)[0]
        if raw.values[0, 0] <= -3:
            break
    else:
        pytest.fail("no seed with noise <= -3 found")
    assert perturb_tables([t], DpConfig(runs=1, seed=seed), 0)[0].values[0, 0] == 0


def _two_tract_tables(black, total):
    schema = make_schema(race=["white", "black"])
    d = TableDefinition("race", ("race",), schema)
    blocks = ("390010001001000", "390010001001001", "390010002001000")
    values = np.array([[total[i] - black[i] for i in range(3)], black])
    return schema, [CensusTable(d, blocks, values)]


def test_tract_percentage_single_tract():
    schema, tables = _two_tract_tables([2, 3, 0], [8, 12, 0])
    pct = tract_percentage(tables, parse_predicate(BLACK, schema), schema)
    assert pct == {"39001000100": 25.0, "39001000200": None}


def test_tract_percentage_levels():
    schema, tables = _two_tract_tables([2, 3, 1], [8, 12, 4])
    target = parse_predicate(BLACK, schema)
    assert tract_percentage(tables, target, schema, "county") == {"39001": 25.0}
    with pytest.raises(GeoError):
        tract_percentage(tables, target, schema, "block_group_x")


def test_tract_percentage_needs_covering_table():
    schema = make_schema(race=["white", "black"], sex=["male", "female"])
    d = TableDefinition("sex", ("sex",), schema)
    t = CensusTable(d, ("390010001001000",), np.array([[1], [2]]))
    with pytest.raises(SchemaError):
        tract_percentage([t], parse_predicate(BLACK, schema), schema)


def test_tract_percentage_uses_smallest_table(toy_county):
    schema, _, tables = toy_county
    target = parse_predicate(BLACK, schema)
    a = tract_percentage(tables, target, schema)
    b = tract_percentage([tables[1], tables[0]], target, schema)
    assert a == b and len(a) == 5


def test_smape_examples():
    assert smape_per_tract(25, [25, 25, 25]) == 0.0
    assert smape_per_tract(10, [30]) == 100.0
    assert smape_per_tract(0, [0, 0]) == 0.0
    assert smape_per_tract(0, [5]) == 200.0
    assert smape_per_tract(10, [30, 10]) == 50.0
    with pytest.raises(ValueError):
        smape_per_tract(1, [])


@given(st.floats(0, 100), st.lists(st.floats(0, 100), min_size=1, max_size=20))
def test_smape_bounds(a, fs):
    s = smape_per_tract(a, fs)
    assert 0.0 <= s <= 200.0 + 1e-9


def test_error_map_large_epsilon(toy_county):
    schema, _, tables = toy_county
    emap = error_map(tables, parse_predicate(BLACK, schema), DpConfig(epsilon=50, runs=5, seed=7), schema)
    assert len(emap.rows) == 5
    assert all(r.smape == 0.0 and r.runs == 5 for r in emap.rows)
    assert [r.tract for r in emap.rows] == sorted(r.tract for r in emap.rows)


def test_error_map_low_share_tract_has_higher_error():
    schema, tables = tract_county([0.02, 0.60], np.random.default_rng(1))
    emap = error_map(tables, parse_predicate(BLACK, schema), DpConfig(epsilon=1, runs=50, seed=3), schema)
    low, high = sorted(emap.rows, key=lambda r: r.true_percentage)
    assert low.true_percentage < 5 < 50 < high.true_percentage
    assert low.smape > high.smape


def test_error_map_zero_population_tract():
    schema, tables = _two_tract_tables([2, 3, 0], [8, 12, 0])
    emap = error_map(tables, parse_predicate(BLACK, schema), DpConfig(runs=4, seed=1), schema)
    assert [r.tract for r in emap.rows] == ["39001000100"]
    assert emap.empty == [("39001000200", "zero population")]
    assert emap.empty_csv() == "tract,reason\n39001000200,zero population\n"


def test_error_map_empty_after_perturbation(monkeypatch):
    schema, tables = _two_tract_tables([2, 3, 1], [8, 12, 2])

    def zero_second_tract(tables, cfg, run_index):
        t = tables[0]
        v = t.values.copy()
        v[:, 2] = 0
        return [CensusTable(t.definition, t.blocks, v)]

    monkeypatch.setattr(privacy, "perturb_tables", zero_second_tract)
    emap = error_map(tables, parse_predicate(BLACK, schema), DpConfig(runs=3), schema)
    assert emap.empty == [("39001000200", "empty in every perturbed run")]
    assert emap.rows[0].smape == 0.0 and emap.rows[0].runs == 3


def test_error_map_threads_identical(toy_county):
    schema, _, tables = toy_county
    cfg = DpConfig(epsilon=1, runs=8, seed=5)
    target = parse_predicate(BLACK, schema)
    a = error_map(tables, target, cfg, schema, threads=1).to_csv()
    b = error_map(tables, target, cfg, schema, threads=4).to_csv()
    assert a == b
    assert a.splitlines()[0] == "tract,true_percentage,smape,runs"


def test_error_map_summary(toy_county):
    schema, _, tables = toy_county
    emap = error_map(tables, parse_predicate(BLACK, schema), DpConfig(runs=10, seed=7), schema)
    s = emap.summary()
    assert s["tracts"] == 5 and s["empty_tracts"] == 0
    assert s["min"] <= s["median"] <= s["max"]
    assert -1 <= s["spearman"] <= 1
    assert "no privacy budget is split" in emap.notes[0]


def test_rank_correlation():
    assert rank_correlation([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert rank_correlation([1, 2], [1, 2]) is None
    assert rank_correlation([1, 2, 3], [5, 5, 5]) is None


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**64 - 1), st.floats(0.1, 5))
def test_perturbation_nonnegative_with_clamp(seed, eps):
    schema, tables = _two_tract_tables([2, 3, 1], [8, 12, 2])
    out = perturb_tables(tables, DpConfig(epsilon=eps, runs=1, seed=seed), 0)
    assert (out[0].values >= 0).all()
