import json
from pathlib import Path

import numpy as np
import pytest

from popsynth.schema import build_predicate_space, parse_schema
from popsynth.solver import CountsMatrix
from popsynth.tables import CensusTable, TableDefinition, aggregate, build_query_matrix, load_tables

DATA = Path(__file__).parent / "data"

PAPER_SCHEMA = {
    "attributes": [
        {"name": "housing", "labels": ["householder", "group-quarters"]},
        {"name": "votingage", "labels": ["under18", "18plus"]},
        {"name": "ethnicity", "labels": ["hispanic", "nonhispanic"]},
        {"name": "race", "labels": ["white", "black", "aian", "asian", "nhpi", "other", "multi"]},
        {"name": "sex", "labels": ["male", "female"]},
    ]
}


def make_schema(**domains):
    return parse_schema(
        json.dumps({"attributes": [{"name": k, "labels": v} for k, v in domains.items()]})
    )


def tables_from_counts(x: CountsMatrix, defs):
    return [CensusTable(d, x.blocks, aggregate(build_query_matrix(d, x.space), x)) for d in defs]


@pytest.fixture
def paper_schema():
    return parse_schema(json.dumps(PAPER_SCHEMA))


@pytest.fixture
def eth_sex():
    return make_schema(ethnicity=["hispanic", "nonhispanic"], sex=["male", "female"])


@pytest.fixture
def small_schema():
    """2 x 2 x 3 schema, K = 12."""
    return make_schema(a=["a0", "a1"], b=["b0", "b1"], c=["c0", "c1", "c2"])


@pytest.fixture
def two_block():
    schema = parse_schema((DATA / "two_block" / "schema.json").read_text())
    space = build_predicate_space(schema)
    tables = load_tables((DATA / "two_block" / "tables.csv").read_text(), schema)
    pop = json.loads((DATA / "two_block" / "population.json").read_text())
    x_true = CountsMatrix(np.array(pop["x"]), space, tuple(pop["blocks"]))
    return schema, space, tables, x_true


@pytest.fixture
def toy_county():
    schema = parse_schema((DATA / "toy_county" / "schema.json").read_text())
    space = build_predicate_space(schema)
    tables = load_tables((DATA / "toy_county" / "tables.csv").read_text(), schema)
    return schema, space, tables


def random_instance(schema, defs, rng, n_blocks=10, max_total=30):
    """Tables generated by aggregating a random known counts matrix."""
    space = build_predicate_space(schema)
    k = len(space)
    cols = [rng.multinomial(int(rng.integers(0, max_total + 1)), rng.dirichlet(np.ones(k)))
            for _ in range(n_blocks)]
    blocks = tuple(f"39049{j:010d}" for j in range(n_blocks))
    x = CountsMatrix(np.array(cols).T, space, blocks)
    return space, x, tables_from_counts(x, defs)


def small_defs(schema):
    return [
        TableDefinition("ab", ("a", "b"), schema),
        TableDefinition("bc", ("b", "c"), schema),
        TableDefinition("ac", ("a", "c"), schema),
    ]


def guarded_instance(rng):
    """Small block problem whose exact optimum lies within brute-force reach.

    Row 0 counts everyone; the other 2-5 rows are random binary queries
    with +-1 noise. The noise-free population x* has total <= 4 and costs
    at most 5, while any x with total >= 7 pays at least (7 - 4)^2 = 9 on
    row 0, so every optimum has total <= 6 and ``brute_force_block(p, 6)``
    is exact.
    """
    from popsynth.solver import BlockProblem

    k = int(rng.integers(2, 7))
    x_star = rng.multinomial(int(rng.integers(0, 5)), np.ones(k) / k)
    rows = rng.integers(0, 2, size=(int(rng.integers(2, 6)), k))
    a = np.vstack([np.ones((1, k), dtype=np.int64), rows])
    noise = np.concatenate([[0], rng.integers(-1, 2, size=rows.shape[0])])
    return BlockProblem(a, np.maximum(a @ x_star + noise, 0))


def tract_county(target_shares, rng, blocks_per_tract=4, block_size=(30, 80)):
    """One county, one tract per entry of ``target_shares`` (share of race=black).

    Returns ``(schema, tables)`` with a race table and a sex table whose
    block totals agree.
    """
    schema = make_schema(race=["white", "black", "other"], sex=["male", "female"])
    space = build_predicate_space(schema)
    blocks, cols = [], []
    for t, share in enumerate(target_shares):
        race_p = np.array([0.95 - share, share, 0.05])
        for b in range(blocks_per_tract):
            blocks.append(f"39001{t + 1:04d}00{1 + b // 10}{b % 10:03d}")
            n = int(rng.integers(*block_size))
            p = race_p[space.codes[:, 0]] * 0.5
            cols.append(rng.multinomial(n, p / p.sum()))
    x = CountsMatrix(np.array(cols).T, space, tuple(blocks))
    defs = [TableDefinition("race", ("race",), schema), TableDefinition("sex", ("sex",), schema)]
    return schema, tables_from_counts(x, defs)
