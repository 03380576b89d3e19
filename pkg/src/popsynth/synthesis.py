"""Expansion of a counts matrix into person records, and back."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import FormatError, ParseError, SchemaError
from .schema import AttributeSchema, PredicateSpace
from .solver import CountsMatrix
from .tables import TableDefinition


@dataclass(frozen=True)
class PersonRecord:
    person_id: int
    block: str
    attributes: dict[str, str]


@dataclass
class PersonTable:
    """Person records stored column-wise.

    ``block_index`` points into ``blocks`` and ``predicate_index`` into the
    full-predicate space, one entry per person.
    """

    space: PredicateSpace
    blocks: tuple[str, ...]
    person_id: np.ndarray
    block_index: np.ndarray
    predicate_index: np.ndarray

    @property
    def schema(self) -> AttributeSchema:
        return self.space.schema

    def __len__(self) -> int:
        return int(self.person_id.shape[0])

    def __iter__(self) -> Iterator[PersonRecord]:
        names = self.schema.names
        attrs = self.schema.attributes
        codes = self.space.codes
        for pid, b, k in zip(
            self.person_id.tolist(), self.block_index.tolist(), self.predicate_index.tolist()
        ):
            labels = {n: a.labels[c] for n, a, c in zip(names, attrs, codes[k])}
            yield PersonRecord(pid, self.blocks[b], labels)

    def label_codes(self) -> np.ndarray:
        """``(n, d)`` label indices of every person."""
        return self.space.codes[self.predicate_index]


def expand(x: CountsMatrix, schema: AttributeSchema | None = None) -> PersonTable:
    """One record per counted person, block-major then predicate order."""
    if schema is not None and schema is not x.space.schema and schema != x.space.schema:
        raise SchemaError("counts matrix was built on a different schema")
    k, j = x.values.shape
    counts = x.values.T.ravel()  # block-major
    cell = np.repeat(np.arange(k * j, dtype=np.int64), counts)
    block_index, predicate_index = np.divmod(cell, k)
    ids = np.arange(cell.shape[0], dtype=np.uint64)
    return PersonTable(x.space, x.blocks, ids, block_index, predicate_index)


def counts_of(people: PersonTable, blocks=None) -> CountsMatrix:
    """Counts matrix of a person table, optionally over a given block ordering."""
    if blocks is None:
        blocks = people.blocks
        bidx = people.block_index
    else:
        blocks = tuple(blocks)
        pos = {b: i for i, b in enumerate(blocks)}
        try:
            remap = np.array([pos[b] for b in people.blocks], dtype=np.int64)
        except KeyError as exc:
            raise FormatError(f"person block {exc.args[0]!r} is not among the table blocks") from None
        bidx = remap[people.block_index] if len(people.blocks) else people.block_index
    k = len(people.space)
    flat = np.bincount(bidx * k + people.predicate_index, minlength=k * len(blocks))
    return CountsMatrix(flat.reshape(len(blocks), k).T.astype(np.int64), people.space, blocks)


def summarize(people: PersonTable, defs: list[TableDefinition], space: PredicateSpace | None = None):
    """Tabulate persons into each table's (marginal predicate x block) layout.

    Works from the persons' attribute labels directly, without query
    matrices, so it serves as an independent check of ``aggregate``.
    """
    space = space or people.space
    codes = people.label_codes()
    nb = len(people.blocks)
    out = []
    for d in defs:
        if d.schema != people.schema:
            raise SchemaError(f"table {d.name!r} uses a different schema")
        rows = d.rows_for_codes(codes)
        flat = np.bincount(rows * nb + people.block_index, minlength=d.n_rows * nb)
        out.append(flat.reshape(d.n_rows, nb).astype(np.int64))
    return out


def write_persons(people: PersonTable, stream) -> int:
    """Write the persons CSV; returns the number of records written."""
    schema = people.schema
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["person_id", "block", *schema.names])
    labels = [np.asarray(a.labels, dtype=object) for a in schema.attributes]
    codes = people.label_codes()
    cols = [lab[codes[:, i]] for i, lab in enumerate(labels)]
    blocks = np.asarray(people.blocks, dtype=object)[people.block_index] if len(people) else []
    w.writerows(zip(people.person_id.tolist(), blocks, *cols))
    return len(people)


def read_persons(text: str, space: PredicateSpace, source: str | None = None) -> PersonTable:
    schema = space.schema
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("persons file is empty", source) from None
    expected = ["person_id", "block", *schema.names]
    if header != expected:
        raise ParseError(f"expected header {','.join(expected)}", source, 1)
    lookup = [{lb: i for i, lb in enumerate(a.labels)} for a in schema.attributes]
    ids, bidx, rows = [], [], []
    blocks: dict[str, int] = {}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(expected):
            raise FormatError(f"expected {len(expected)} fields, got {len(row)}", source, line)
        try:
            pid = int(row[0])
        except ValueError:
            raise ParseError(f"person_id {row[0]!r} is not an integer", source, line) from None
        if pid < 0:
            raise FormatError("person_id must be nonnegative", source, line)
        try:
            rows.append([lk[v] for lk, v in zip(lookup, row[2:])])
        except KeyError as exc:
            raise SchemaError(f"{source or '<persons>'}:{line}: unknown label {exc.args[0]!r}") from None
        ids.append(pid)
        bidx.append(blocks.setdefault(row[1], len(blocks)))
    pred = space.codes_of(np.asarray(rows, dtype=np.int64).reshape(-1, schema.d))
    return PersonTable(
        space,
        tuple(blocks),
        np.asarray(ids, dtype=np.uint64),
        np.asarray(bidx, dtype=np.int64),
        pred.astype(np.int64),
    )
