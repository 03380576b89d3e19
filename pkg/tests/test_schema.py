import json

import pytest
from hypothesis import given, strategies as st

from popsynth.errors import GeoError, ParseError, SchemaError
from popsynth.schema import (
    UNIVERSAL,
    GeoId,
    build_predicate_space,
    geo_parent,
    make_predicate,
    parse_predicate,
    parse_schema,
    subsumes,
)

from conftest import PAPER_SCHEMA, make_schema


def test_paper_schema_has_112_full_predicates(paper_schema):
    assert paper_schema.d == 5
    assert paper_schema.n_full_predicates == 2 * 2 * 2 * 7 * 2 == 112
    assert len(build_predicate_space(paper_schema)) == 112


def test_minimal_schema():
    s = make_schema(sex=["male", "female"])
    assert s.d == 1
    space = build_predicate_space(s)
    assert [str(p) for p in space] == ["sex=male", "sex=female"]


@pytest.mark.parametrize(
    "doc",
    [
        {"attributes": [{"name": "x", "labels": ["a", "b"]}, {"name": "x", "labels": ["c", "d"]}]},
        {"attributes": [{"name": "x", "labels": ["a"]}]},
        {"attributes": [{"name": "x", "labels": ["a", "a"]}]},
        {"attributes": []},
        {"attributes": [{"name": "x", "labels": ["a", "b"]}], "geo_prefix_lengths": {"county": 5, "tract": 3}},
    ],
)
def test_schema_rejections(doc):
    with pytest.raises(SchemaError):
        parse_schema(json.dumps(doc))


@pytest.mark.parametrize("text", ["{not json", "[]", '{"attributes": [{"name": 3}]}'])
def test_malformed_schema_text(text):
    with pytest.raises(ParseError):
        parse_schema(text)


def test_cap_enforced():
    doc = {"attributes": [{"name": f"a{i}", "labels": ["x", "y", "z"]} for i in range(5)]}
    assert parse_schema(json.dumps(doc)).n_full_predicates == 243
    with pytest.raises(SchemaError, match="cap"):
        parse_schema(json.dumps(doc), max_predicates=200)


def test_canonical_order(eth_sex):
    space = build_predicate_space(eth_sex)
    assert [p.as_dict() for p in space] == [
        {"ethnicity": "hispanic", "sex": "male"},
        {"ethnicity": "hispanic", "sex": "female"},
        {"ethnicity": "nonhispanic", "sex": "male"},
        {"ethnicity": "nonhispanic", "sex": "female"},
    ]
    for k, p in enumerate(space):
        assert space.index_of(p) == k


def test_serialization_is_stable(paper_schema):
    text = json.dumps(PAPER_SCHEMA)
    a = build_predicate_space(parse_schema(text))
    b = build_predicate_space(parse_schema(text))
    assert "\n".join(map(str, a)) == "\n".join(map(str, b))
    assert parse_schema(paper_schema.to_json()) == paper_schema


def test_subsumes_examples(paper_schema):
    full = parse_predicate(
        "housing=householder;votingage=18plus;ethnicity=hispanic;race=white;sex=male", paper_schema
    )
    assert subsumes(parse_predicate("ethnicity=hispanic;race=white", paper_schema), full, paper_schema)
    assert subsumes(UNIVERSAL, full, paper_schema)
    female = parse_predicate(
        "housing=householder;votingage=18plus;ethnicity=hispanic;race=white;sex=female", paper_schema
    )
    assert not subsumes(parse_predicate("sex=male", paper_schema), female, paper_schema)


def test_subsumes_rejects_unknown(paper_schema):
    full = build_predicate_space(paper_schema).predicate(0)
    with pytest.raises(SchemaError):
        parse_predicate("race=purple", paper_schema)
    from popsynth.schema import Predicate

    with pytest.raises(SchemaError):
        subsumes(Predicate((("colour", "red"),)), full, paper_schema)


def test_parse_predicate_canonicalizes(paper_schema):
    p = parse_predicate("sex=male; race=black", paper_schema)
    assert str(p) == "race=black;sex=male"
    assert p == make_predicate({"race": "black", "sex": "male"}, paper_schema)
    with pytest.raises(ParseError):
        parse_predicate("race", paper_schema)


@given(st.data())
def test_subsumes_reflexive_and_monotone(data):
    schema = make_schema(a=["0", "1"], b=["0", "1", "2"], c=["0", "1"])
    space = build_predicate_space(schema)
    f = space.predicate(data.draw(st.integers(0, len(space) - 1)))
    assert subsumes(f, f, schema)
    items = f.as_dict()
    big = data.draw(st.sets(st.sampled_from(sorted(items))))
    small = data.draw(st.sets(st.sampled_from(sorted(big)))) if big else set()
    b_pred = make_predicate({k: items[k] for k in big}, schema)
    s_pred = make_predicate({k: items[k] for k in small}, schema)
    assert subsumes(b_pred, f, schema)
    assert subsumes(s_pred, f, schema)


def test_partition_of_space():
    schema = make_schema(a=["0", "1"], b=["0", "1", "2"], c=["0", "1", "2", "3"])
    space = build_predicate_space(schema)
    assert sum(1 for _ in space) == 24
    assert len(set(space.full_predicates)) == 24


def test_geo_parent():
    block = GeoId("390490001001000", "block")
    tract = geo_parent(block, "tract")
    assert tract == GeoId("39049000100", "tract")
    assert geo_parent(tract, "county") == GeoId("39049", "county")
    assert geo_parent(block, "block_group").code == "390490001001"
    with pytest.raises(GeoError):
        geo_parent(GeoId("39049", "county"), "tract")
    with pytest.raises(GeoError):
        geo_parent(GeoId("1000", "block"), "tract")


def test_geo_parent_custom_lengths():
    lengths = {"county": 2, "tract": 4, "block_group": 5, "block": 7}
    assert geo_parent(GeoId("AB12345", "block"), "tract", lengths).code == "AB12"
