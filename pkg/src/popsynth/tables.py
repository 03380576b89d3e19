"""Census-style marginal tables, query matrices and aggregation.

Tables are stored with marginal predicates as rows and blocks as columns,
so ``aggregate(W, X)`` lines up cell for cell with ``CensusTable.values``.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DimensionError, FormatError, ParseError, SchemaError
from .schema import AttributeSchema, Predicate, PredicateSpace, parse_predicate, subsumes

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("table", "block", "predicate", "count")


@dataclass(frozen=True)
class TableDefinition:
    name: str
    attribute_subset: tuple[str, ...]
    schema: AttributeSchema = field(repr=False, compare=False)

    def __post_init__(self):
        for a in self.attribute_subset:
            self.schema.attribute(a)
        order = [self.schema.position(a) for a in self.attribute_subset]
        if order != sorted(set(order)):
            raise SchemaError(
                f"table {self.name!r}: attribute subset must be distinct and in schema order"
            )

    @cached_property
    def marginal_predicates(self) -> list[Predicate]:
        attrs = [self.schema.attribute(a) for a in self.attribute_subset]
        return [
            Predicate(tuple((a.name, lb) for a, lb in zip(attrs, combo)))
            for combo in itertools.product(*(a.labels for a in attrs))
        ]

    @property
    def n_rows(self) -> int:
        return len(self.marginal_predicates)

    def row_of(self, predicate: Predicate) -> int:
        if predicate.attributes() != self.attribute_subset:
            raise SchemaError(f"{predicate} does not match the attributes of table {self.name!r}")
        i = 0
        for name, label in predicate.assignments:
            a = self.schema.attribute(name)
            i = i * len(a.labels) + a.label_index(label)
        return i

    def rows_for_codes(self, codes: np.ndarray) -> np.ndarray:
        """Marginal row index for each row of an ``(n, d)`` label-index array."""
        codes = np.asarray(codes, dtype=np.int64)
        out = np.zeros(codes.shape[0], dtype=np.int64)
        for name in self.attribute_subset:
            pos = self.schema.position(name)
            out = out * self.schema.sizes[pos] + codes[:, pos]
        return out


@dataclass(frozen=True)
class CensusTable:
    definition: TableDefinition
    blocks: tuple[str, ...]
    values: np.ndarray
    # perturbed tables without a nonnegativity fix may hold negative counts
    allow_negative: bool = field(default=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (self.definition.n_rows, len(self.blocks)):
            raise DimensionError(
                f"table {self.name!r}: values have shape {v.shape}, expected "
                f"{(self.definition.n_rows, len(self.blocks))}"
            )
        if not np.issubdtype(v.dtype, np.integer):
            raise FormatError(f"table {self.name!r}: counts must be integers")
        if v.size and v.min() < 0 and not self.allow_negative:
            raise FormatError(f"table {self.name!r}: counts must be nonnegative integers")
        v = v.astype(np.int64, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def name(self) -> str:
        return self.definition.name

    def block_totals(self) -> np.ndarray:
        return self.values.sum(axis=0)


@dataclass(frozen=True)
class QueryMatrix:
    table: str
    entries: np.ndarray

    @property
    def shape(self):
        return self.entries.shape


@dataclass
class ConsistencyReport:
    table_names: list[str]
    blocks: list[str]
    totals: np.ndarray  # (n_tables, n_blocks)
    discrepancies: list[tuple[str, str, str, int]]

    @property
    def max_discrepancy(self) -> int:
        return max((d for *_, d in self.discrepancies), default=0)

    @property
    def is_consistent(self) -> bool:
        return not self.discrepancies

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "table_a", "table_b", "discrepancy"])
        w.writerows(self.discrepancies)
        return buf.getvalue()


def load_tables(text: str, schema: AttributeSchema, source: str | None = None) -> list[CensusTable]:
    """Parse the ``table,block,predicate,count`` CSV format.

    Block order is the order of first appearance in the file and is shared
    by every returned table.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("tables file is empty", source) from None
    header = [h.strip() for h in header]
    if tuple(header) != TABLE_COLUMNS:
        raise ParseError(f"expected header {','.join(TABLE_COLUMNS)}, got {','.join(header)}", source, 1)

    cells: dict[str, dict[tuple[Predicate, str], int]] = {}
    subsets: dict[str, tuple[str, ...]] = {}
    block_order: dict[str, None] = {}
    pred_cache: dict[str, Predicate] = {}
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise FormatError(f"expected 4 fields, got {len(row)}", source, line)
        table, block, ptext, ctext = (c.strip() for c in row)
        if not table or not block:
            raise FormatError("table and block must be non-empty", source, line)
        pred = pred_cache.get(ptext)
        if pred is None:
            try:
                pred = parse_predicate(ptext, schema)
            except SchemaError as exc:
                raise SchemaError(f"{source or '<tables>'}:{line}: {exc}") from None
            except ParseError as exc:
                raise ParseError(str(exc), source, line) from None
            pred_cache[ptext] = pred
        try:
            count = int(ctext, 10)
        except ValueError:
            raise ParseError(f"count {ctext!r} is not a base-10 integer", source, line) from None
        if count < 0:
            raise FormatError(f"negative count {count}", source, line)
        subset = pred.attributes()
        if subsets.setdefault(table, subset) != subset:
            raise FormatError(
                f"table {table!r} mixes predicates over {subsets[table]} and {subset}", source, line
            )
        tcells = cells.setdefault(table, {})
        if (pred, block) in tcells:
            raise FormatError(f"duplicate cell ({table}, {block}, {ptext})", source, line)
        tcells[(pred, block)] = count
        block_order.setdefault(block, None)

    if not cells:
        raise FormatError("tables file has no data rows", source)
    blocks = tuple(block_order)
    col = {b: j for j, b in enumerate(blocks)}
    out = []
    for table, tcells in cells.items():
        definition = TableDefinition(table, subsets[table], schema)
        table_blocks = {b for _, b in tcells}
        if table_blocks != set(blocks):
            missing = sorted(set(blocks) - table_blocks)
            raise FormatError(
                f"table {table!r} does not cover the shared block set (missing {missing[:5]})",
                source,
            )
        expected = definition.n_rows * len(blocks)
        if len(tcells) != expected:
            raise FormatError(
                f"table {table!r} has {len(tcells)} cells, expected {expected} "
                "(every marginal predicate x block)",
                source,
            )
        values = np.zeros((definition.n_rows, len(blocks)), dtype=np.int64)
        for (pred, block), count in tcells.items():
            values[definition.row_of(pred), col[block]] = count
        out.append(CensusTable(definition, blocks, values))
    report = check_consistency(out)
    if not report.is_consistent:
        log.warning(
            "tables disagree on block totals in %d place(s), max discrepancy %d",
            len(report.discrepancies),
            report.max_discrepancy,
        )
    return out


def write_tables(tables: list[CensusTable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for t in tables:
        preds = [str(p) for p in t.definition.marginal_predicates]
        for j, block in enumerate(t.blocks):
            for i, p in enumerate(preds):
                w.writerow([t.name, block, p, int(t.values[i, j])])
    return buf.getvalue()


def build_query_matrix(
    definition: TableDefinition, space: PredicateSpace, schema: AttributeSchema | None = None
) -> QueryMatrix:
    """Binary matrix with ``w[i, k] = 1`` iff marginal predicate i subsumes full predicate k."""
    schema = schema or space.schema
    for a in definition.attribute_subset:
        schema.attribute(a)
    rows = definition.rows_for_codes(space.codes)
    w = np.zeros((definition.n_rows, len(space)), dtype=np.int64)
    w[rows, np.arange(len(space))] = 1
    w.setflags(write=False)
    return QueryMatrix(definition.name, w)


def build_query_matrix_slow(
    definition: TableDefinition, space: PredicateSpace, schema: AttributeSchema | None = None
) -> QueryMatrix:
    """Same as :func:`build_query_matrix`, evaluated pairwise with :func:`subsumes`."""
    schema = schema or space.schema
    full = space.full_predicates
    w = np.array(
        [[int(subsumes(m, f, schema)) for f in full] for m in definition.marginal_predicates],
        dtype=np.int64,
    ).reshape(definition.n_rows, len(full))
    return QueryMatrix(definition.name, w)


def aggregate(w: QueryMatrix | np.ndarray, x) -> np.ndarray:
    """Return ``W @ X``, the table-shaped summary of a counts matrix."""
    entries = w.entries if isinstance(w, QueryMatrix) else np.asarray(w)
    values = getattr(x, "values", x)
    values = np.asarray(values)
    if values.ndim not in (1, 2) or entries.shape[1] != values.shape[0]:
        raise DimensionError(
            f"query matrix has {entries.shape[1]} columns but counts have shape {values.shape}"
        )
    return entries @ values


def check_consistency(tables: list[CensusTable]) -> ConsistencyReport:
    """Compare the block totals implied by each table."""
    if not tables:
        raise ValueError("need at least one table")
    blocks = list(tables[0].blocks)
    for t in tables[1:]:
        if list(t.blocks) != blocks:
            raise FormatError(f"table {t.name!r} uses a different block ordering")
    totals = np.vstack([t.block_totals() for t in tables])
    names = [t.name for t in tables]
    found = []
    for j, block in enumerate(blocks):
        col = totals[:, j]
        if col.min() == col.max():
            continue
        for a, b in itertools.combinations(range(len(tables)), 2):
            if col[a] != col[b]:
                found.append((block, names[a], names[b], int(abs(col[a] - col[b]))))
    return ConsistencyReport(names, blocks, totals, found)
