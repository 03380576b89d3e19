"""Attributes, predicates and the full-predicate space.

A *predicate* fixes the value of some subset of the schema's attributes.
Predicates fixing every attribute are *full*; they index the rows of a
counts matrix. Full predicates are ordered lexicographically by attribute
order, then by label order within each domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping

import numpy as np

from .errors import GeoError, ParseError, SchemaError

GEO_LEVELS = ("county", "tract", "block_group", "block")
DEFAULT_GEO_PREFIX_LENGTHS = {"county": 5, "tract": 11, "block_group": 12, "block": 15}
DEFAULT_MAX_PREDICATES = 10**6


@dataclass(frozen=True)
class Attribute:
    name: str
    labels: tuple[str, ...]

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise SchemaError(
                f"label {label!r} not in domain of attribute {self.name!r}"
            ) from None


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[Attribute, ...]
    geo_prefix_lengths: Mapping[str, int] = field(
        default_factory=lambda: dict(DEFAULT_GEO_PREFIX_LENGTHS)
    )
    max_predicates: int = DEFAULT_MAX_PREDICATES

    def __post_init__(self):
        if not self.attributes:
            raise SchemaError("schema needs at least one attribute")
        names = [a.name for a in self.attributes]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate attribute name(s): {', '.join(dupes)}")
        for a in self.attributes:
            if not a.name:
                raise SchemaError("attribute names must be non-empty")
            if len(a.labels) < 2:
                raise SchemaError(f"attribute {a.name!r} needs at least 2 labels")
            seen = sorted({lb for lb in a.labels if a.labels.count(lb) > 1})
            if seen:
                raise SchemaError(
                    f"duplicate label(s) in attribute {a.name!r}: {', '.join(seen)}"
                )
            for lb in a.labels:
                if not lb or any(c in lb for c in "=;,\n"):
                    raise SchemaError(
                        f"label {lb!r} of {a.name!r} is empty or contains a reserved character"
                    )
        size = self.n_full_predicates
        if size > self.max_predicates:
            raise SchemaError(
                f"full-predicate space has {size} cells, above the cap of {self.max_predicates}"
            )
        lengths = dict(self.geo_prefix_lengths)
        if set(lengths) != set(GEO_LEVELS):
            raise SchemaError(f"geo_prefix_lengths must define exactly {GEO_LEVELS}")
        prev = 0
        for level in GEO_LEVELS:
            if not isinstance(lengths[level], int) or lengths[level] <= prev:
                raise SchemaError("geo_prefix_lengths must be strictly increasing integers")
            prev = lengths[level]
        object.__setattr__(self, "geo_prefix_lengths", lengths)

    @property
    def d(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(a.labels) for a in self.attributes)

    @property
    def n_full_predicates(self) -> int:
        return math.prod(self.sizes)

    def attribute(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaError(f"unknown attribute {name!r}")

    def position(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown attribute {name!r}") from None

    def to_json(self) -> str:
        doc = {
            "attributes": [{"name": a.name, "labels": list(a.labels)} for a in self.attributes],
            "geo_prefix_lengths": dict(self.geo_prefix_lengths),
        }
        return json.dumps(doc, indent=2) + "\n"


@dataclass(frozen=True)
class Predicate:
    """A partial assignment ``attribute -> label``.

    ``assignments`` is kept sorted by schema attribute order when built
    through :func:`make_predicate` or :func:`parse_predicate`, so equal
    predicates compare and hash equal.
    """

    assignments: tuple[tuple[str, str], ...] = ()

    @property
    def is_universal(self) -> bool:
        return not self.assignments

    def as_dict(self) -> dict[str, str]:
        return dict(self.assignments)

    def attributes(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.assignments)

    def is_full(self, schema: AttributeSchema) -> bool:
        return len(self.assignments) == schema.d

    def __str__(self) -> str:
        return ";".join(f"{k}={v}" for k, v in self.assignments)


UNIVERSAL = Predicate(())


def make_predicate(assignments: Mapping[str, str], schema: AttributeSchema) -> Predicate:
    """Validate ``assignments`` against ``schema`` and return it in canonical order."""
    for name, label in assignments.items():
        schema.attribute(name).label_index(label)
    ordered = tuple((n, assignments[n]) for n in schema.names if n in assignments)
    return Predicate(ordered)


def parse_predicate(text: str, schema: AttributeSchema) -> Predicate:
    """Parse ``attr1=label1;attr2=label2``; the empty string is the universal predicate."""
    text = text.strip()
    if not text:
        return UNIVERSAL
    out: dict[str, str] = {}
    for part in text.split(";"):
        name, sep, label = part.partition("=")
        name, label = name.strip(), label.strip()
        if not sep or not name or not label:
            raise ParseError(f"malformed predicate term {part!r} in {text!r}")
        if name in out:
            raise ParseError(f"attribute {name!r} repeated in predicate {text!r}")
        out[name] = label
    return make_predicate(out, schema)


def parse_schema(text: str, max_predicates: int = DEFAULT_MAX_PREDICATES) -> AttributeSchema:
    """Build an :class:`AttributeSchema` from the JSON schema-file format."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"schema is not valid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("attributes"), list):
        raise ParseError('schema must be an object with an "attributes" list')
    attrs = []
    for i, item in enumerate(doc["attributes"]):
        if not isinstance(item, dict):
            raise ParseError(f"attribute #{i} is not an object")
        name, labels = item.get("name"), item.get("labels")
        if not isinstance(name, str) or not isinstance(labels, list):
            raise ParseError(f'attribute #{i} needs a string "name" and a "labels" list')
        if not all(isinstance(lb, str) for lb in labels):
            raise ParseError(f"labels of attribute {name!r} must be strings")
        attrs.append(Attribute(name, tuple(labels)))
    lengths = doc.get("geo_prefix_lengths", DEFAULT_GEO_PREFIX_LENGTHS)
    if not isinstance(lengths, dict):
        raise ParseError('"geo_prefix_lengths" must be an object')
    merged = dict(DEFAULT_GEO_PREFIX_LENGTHS)
    merged.update(lengths)
    if set(merged) != set(GEO_LEVELS):
        raise SchemaError(f"unknown geography level(s) in {sorted(lengths)}")
    return AttributeSchema(tuple(attrs), merged, max_predicates)


class PredicateSpace:
    """Canonically ordered full predicates of a schema.

    Rows are stored as a ``(K, d)`` array of label indices; row ``k`` is the
    mixed-radix expansion of ``k`` with the last attribute varying fastest.
    """

    def __init__(self, schema: AttributeSchema):
        self.schema = schema
        sizes = np.asarray(schema.sizes, dtype=np.int64)
        self.size = int(np.prod(sizes))
        # place values for the mixed-radix code, last attribute fastest
        self.strides = np.ones(schema.d, dtype=np.int64)
        for i in range(schema.d - 2, -1, -1):
            self.strides[i] = self.strides[i + 1] * sizes[i + 1]
        k = np.arange(self.size, dtype=np.int64)
        self.codes = (k[:, None] // self.strides[None, :]) % sizes[None, :]
        self.codes.setflags(write=False)

    def __len__(self) -> int:
        return self.size

    def __iter__(self) -> Iterator[Predicate]:
        return iter(self.full_predicates)

    @cached_property
    def full_predicates(self) -> list[Predicate]:
        attrs = self.schema.attributes
        return [
            Predicate(tuple((a.name, a.labels[c]) for a, c in zip(attrs, row)))
            for row in self.codes.tolist()
        ]

    def index_of(self, predicate: Predicate) -> int:
        if not predicate.is_full(self.schema):
            raise SchemaError(f"{predicate} is not a full predicate")
        k = 0
        for (name, label), attr, stride in zip(
            predicate.assignments, self.schema.attributes, self.strides
        ):
            if name != attr.name:
                raise SchemaError(f"{predicate} is not in canonical attribute order")
            k += int(stride) * attr.label_index(label)
        return k

    def codes_of(self, label_indices: np.ndarray) -> np.ndarray:
        """Row indices for an ``(n, d)`` array of label indices."""
        return np.asarray(label_indices, dtype=np.int64) @ self.strides

    def predicate(self, k: int) -> Predicate:
        return self.full_predicates[k]


def build_predicate_space(schema: AttributeSchema) -> PredicateSpace:
    if schema.n_full_predicates > schema.max_predicates:
        raise SchemaError("full-predicate space exceeds the configured cap")
    return PredicateSpace(schema)


def subsumes(marginal: Predicate, full: Predicate, schema: AttributeSchema) -> bool:
    """True iff every assignment of ``marginal`` also appears in ``full``."""
    for name, label in marginal.assignments + full.assignments:
        schema.attribute(name).label_index(label)
    if not full.is_full(schema):
        raise SchemaError(f"{full} is not a full predicate")
    fixed = full.as_dict()
    return all(fixed[name] == label for name, label in marginal.assignments)


@dataclass(frozen=True)
class GeoId:
    code: str
    level: str = "block"

    def __post_init__(self):
        if self.level not in GEO_LEVELS:
            raise GeoError(f"unknown geography level {self.level!r}")

    def __str__(self) -> str:
        return self.code


def geo_parent(
    geo: GeoId, level: str, prefix_lengths: Mapping[str, int] = DEFAULT_GEO_PREFIX_LENGTHS
) -> GeoId:
    """Ancestor of ``geo`` at ``level``, taken as a prefix of its code."""
    if level not in GEO_LEVELS:
        raise GeoError(f"unknown geography level {level!r}")
    if GEO_LEVELS.index(level) >= GEO_LEVELS.index(geo.level):
        raise GeoError(f"{level} is not an ancestor level of {geo.level} {geo.code!r}")
    n = prefix_lengths[level]
    if len(geo.code) < prefix_lengths[geo.level] or len(geo.code) < n:
        raise GeoError(
            f"{geo.level} code {geo.code!r} is shorter than the expected "
            f"{prefix_lengths[geo.level]} characters"
        )
    return GeoId(geo.code[:n], level)
