"""Synthetic individual-level populations from census-style marginal tables."""

__version__ = "0.1.0"

from .errors import (
    DegenerateError,
    DimensionError,
    FormatError,
    GeoError,
    GuardError,
    ParseError,
    PopSynthError,
    SchemaError,
)
from .schema import (
    AttributeSchema,
    GeoId,
    Predicate,
    PredicateSpace,
    build_predicate_space,
    geo_parent,
    parse_predicate,
    parse_schema,
    subsumes,
)
from .tables import (
    CensusTable,
    QueryMatrix,
    TableDefinition,
    aggregate,
    build_query_matrix,
    check_consistency,
    load_tables,
)
from .solver import (
    BlockProblem,
    CountsMatrix,
    SolveConfig,
    SolveResult,
    solve_all,
    solve_block,
)
from .synthesis import PersonTable, counts_of, expand, summarize
from .validation import external_validate, internal_validate, pearson_r
from .privacy import DpConfig, ErrorMap, error_map, perturb_tables
