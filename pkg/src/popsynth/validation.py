"""In-sample and out-of-sample agreement checks based on Pearson's r."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, FormatError, GeoError, ParseError, SchemaError
from .schema import GeoId, PredicateSpace, geo_parent
from .solver import CountsMatrix
from .synthesis import PersonTable
from .tables import CensusTable, aggregate, build_query_matrix


def pearson_r(a, b) -> float:
    """Pearson product-moment correlation of two equal-length vectors.

    Raises
    ------
    DegenerateError
        If either vector is constant, in which case r is undefined.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("need at least two points")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateError("constant input vector; correlation undefined")
    r = float(da @ db) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


@dataclass
class GroupResult:
    group: str
    n_points: int
    r: float | None
    note: str = ""

    @property
    def degenerate(self) -> bool:
        return self.r is None


@dataclass
class ValidationReport:
    groups: list[GroupResult]
    overall: GroupResult
    scatter: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "n_points", "r"])
        for g in [*self.groups, self.overall]:
            w.writerow([g.group, g.n_points, "undefined" if g.r is None else repr(g.r)])
        return buf.getvalue()

    def scatter_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "synthetic", "reference"])
        for name, (syn, ref) in self.scatter.items():
            for s, r in zip(syn.tolist(), ref.tolist()):
                w.writerow([name, s, r])
        return buf.getvalue()


def _group_result(name, syn, ref) -> GroupResult:
    try:
        r = pearson_r(syn, ref)
    except DegenerateError as exc:
        return GroupResult(name, int(syn.shape[0]), None, str(exc))
    except ValueError as exc:
        return GroupResult(name, int(syn.shape[0]), None, str(exc))
    return GroupResult(name, int(syn.shape[0]), r)


def default_group_name(table: CensusTable) -> str:
    return "+".join(table.definition.attribute_subset) or "total"


def internal_validate(
    x: CountsMatrix,
    tables: list[CensusTable],
    groups: dict[str, list[str]] | None = None,
    keep_scatter: bool = False,
) -> ValidationReport:
    """Correlate each table with the same summary of ``x``.

    Tables are pooled into groups: by default one group per distinct
    attribute subset, or ``groups`` mapping a group name to table names.
    Each group pools the (predicate, block) cells of its tables.
    """
    by_name = {t.name: t for t in tables}
    if groups is None:
        groups = {}
        for t in tables:
            groups.setdefault(default_group_name(t), []).append(t.name)
    pairs: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for gname, members in groups.items():
        syn, ref = [], []
        for tname in members:
            if tname not in by_name:
                raise SchemaError(f"validation group {gname!r} names unknown table {tname!r}")
            t = by_name[tname]
            if tuple(t.blocks) != tuple(x.blocks):
                raise FormatError(f"table {tname!r} blocks do not match the counts matrix")
            w = build_query_matrix(t.definition, x.space)
            syn.append(aggregate(w, x).ravel())
            ref.append(t.values.ravel())
        pairs[gname] = (np.concatenate(syn), np.concatenate(ref))
    results = [_group_result(g, *pairs[g]) for g in pairs]
    all_syn = np.concatenate([p[0] for p in pairs.values()])
    all_ref = np.concatenate([p[1] for p in pairs.values()])
    overall = _group_result("overall", all_syn, all_ref)
    return ValidationReport(results, overall, pairs if keep_scatter else {})


@dataclass
class MicrodataSample:
    space: PredicateSpace
    predicate_index: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if (self.weights < 0).any() or not np.isfinite(self.weights).all():
            raise FormatError("sampling weights must be finite and nonnegative")

    def __len__(self) -> int:
        return int(self.predicate_index.shape[0])

    def weighted_counts(self) -> np.ndarray:
        return np.bincount(self.predicate_index, weights=self.weights, minlength=len(self.space))


def load_microdata(text: str, space: PredicateSpace, source: str | None = None) -> MicrodataSample:
    """Parse the ``weight,<attr1>,...`` microdata CSV."""
    schema = space.schema
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("microdata file is empty", source) from None
    expected = ["weight", *schema.names]
    if header != expected:
        raise ParseError(f"expected header {','.join(expected)}", source, 1)
    lookup = [{lb: i for i, lb in enumerate(a.labels)} for a in schema.attributes]
    rows, weights = [], []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(expected):
            raise FormatError(f"expected {len(expected)} fields, got {len(row)}", source, line)
        wtext = row[0].strip()
        try:
            weight = float(wtext) if wtext else 1.0
        except ValueError:
            raise ParseError(f"weight {wtext!r} is not a number", source, line) from None
        if not weight >= 0 or not math.isfinite(weight):
            raise FormatError(f"weight {wtext!r} must be finite and nonnegative", source, line)
        try:
            rows.append([lk[v.strip()] for lk, v in zip(lookup, row[1:])])
        except KeyError as exc:
            raise SchemaError(
                f"{source or '<microdata>'}:{line}: unknown label {exc.args[0]!r}"
            ) from None
        weights.append(weight)
    pred = space.codes_of(np.asarray(rows, dtype=np.int64).reshape(-1, schema.d))
    return MicrodataSample(space, pred.astype(np.int64), np.asarray(weights))


def county_vector(people: PersonTable, county: GeoId) -> np.ndarray:
    """Full-predicate counts of the persons living in ``county``."""
    lengths = people.schema.geo_prefix_lengths
    in_county = np.array(
        [geo_parent(GeoId(b, "block"), "county", lengths).code == county.code for b in people.blocks],
        dtype=bool,
    )
    mask = in_county[people.block_index] if len(people) else np.zeros(0, dtype=bool)
    if not mask.any():
        raise GeoError(f"no synthetic persons in county {county.code!r}")
    return np.bincount(people.predicate_index[mask], minlength=len(people.space)).astype(np.float64)


def external_validate(
    people: PersonTable, sample: MicrodataSample, county: GeoId, keep_scatter: dict | None = None
) -> float:
    """Correlate county-level predicate proportions of persons and a microdata sample.

    Both count vectors are divided by their own totals before correlating,
    which makes the result independent of the sample's weight scale.
    """
    if county.level != "county":
        raise GeoError(f"expected a county identifier, got level {county.level!r}")
    if len(sample.space) != len(people.space) or sample.space.schema != people.schema:
        raise SchemaError("microdata and persons use different schemas")
    syn = county_vector(people, county)
    ref = sample.weighted_counts()
    if ref.sum() <= 0:
        raise DegenerateError("microdata sample has zero total weight")
    syn = syn / syn.sum()
    ref = ref / ref.sum()
    if keep_scatter is not None:
        keep_scatter[county.code] = (syn, ref)
    return pearson_r(syn, ref)
