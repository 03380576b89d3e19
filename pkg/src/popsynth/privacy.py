"""Differential-privacy perturbation of tables and the per-tract error map.

Noise is two-sided geometric (discrete Laplace) added independently to
every cell. Randomness comes from a counter-based generator: each cell's
draws are a pure function of ``(seed, run, table, predicate, block)``, so
the output does not depend on evaluation order or thread count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import SchemaError
from .schema import AttributeSchema, GeoId, Predicate, geo_parent
from .tables import CensusTable

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = 2**64 - 1


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, elementwise on uint64 arrays."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def stream_key(seed: int, *parts) -> np.ndarray:
    """Fold ``parts`` (ints or broadcastable uint64 arrays) into a stream key."""
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & _MASK64) + _GOLDEN)
        for part in parts:
            h = _mix((h ^ np.asarray(part, dtype=np.uint64)) + _GOLDEN)
    return h


def stream_u64(key: np.ndarray, counter: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        return _mix(np.asarray(key, dtype=np.uint64) + np.uint64(counter + 1) * _GOLDEN)


def _unit_interval(u: np.ndarray) -> np.ndarray:
    # top 53 bits mapped to (0, 1]
    return ((u >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53


def _geometric(u: np.ndarray, epsilon: float) -> np.ndarray:
    """Geometric on {0, 1, ...} with P(G >= n) = exp(-epsilon * n)."""
    return np.floor(-np.log(_unit_interval(u)) / epsilon).astype(np.int64)


class CounterRng:
    """Sequential view of one counter-based stream."""

    def __init__(self, seed: int, *key_parts: int):
        self.key = stream_key(seed, *key_parts)
        self.counter = 0

    def next_u64(self) -> np.uint64:
        out = stream_u64(self.key, self.counter)
        self.counter += 1
        return out

    def random(self) -> float:
        return float(_unit_interval(self.next_u64()))


def two_sided_geometric(epsilon: float, rng: CounterRng) -> int:
    """One draw with P(Z = z) proportional to exp(-epsilon * |z|).

    Sampled as the difference of two independent geometric variables.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    g1 = _geometric(rng.next_u64(), epsilon)
    g2 = _geometric(rng.next_u64(), epsilon)
    return int(g1 - g2)


def geometric_noise(epsilon: float, keys: np.ndarray) -> np.ndarray:
    """Vectorized two-sided geometric draws, one per stream key."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return _geometric(stream_u64(keys, 0), epsilon) - _geometric(stream_u64(keys, 1), epsilon)


def geometric_variance(epsilon: float) -> float:
    alpha = math.exp(-epsilon)
    return 2 * alpha / (1 - alpha) ** 2


@dataclass(frozen=True)
class DpConfig:
    epsilon: float = 1.0
    runs: int = 50
    seed: int = 0
    nonnegativity_fix: str = "clamp"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.nonnegativity_fix not in ("clamp", "none"):
            raise ValueError("nonnegativity_fix must be 'clamp' or 'none'")


def perturb_tables(tables: list[CensusTable], cfg: DpConfig, run_index: int) -> list[CensusTable]:
    """Add independent two-sided geometric noise to every cell of every table."""
    if not 0 <= run_index < cfg.runs:
        raise ValueError(f"run_index {run_index} outside [0, {cfg.runs})")
    out = []
    for t in tables:
        block_keys = np.array([hash64(b) for b in t.blocks], dtype=np.uint64)
        rows = np.arange(t.definition.n_rows, dtype=np.uint64)
        keys = stream_key(cfg.seed, run_index, hash64(t.name), rows[:, None], block_keys[None, :])
        values = t.values + geometric_noise(cfg.epsilon, keys)
        if cfg.nonnegativity_fix == "clamp":
            values = np.maximum(values, 0)
        out.append(
            CensusTable(t.definition, t.blocks, values, allow_negative=cfg.nonnegativity_fix == "none")
        )
    return out


def _target_table(tables: list[CensusTable], target: Predicate) -> CensusTable:
    """Smallest table whose attributes cover ``target``; first one wins ties."""
    need = set(target.attributes())
    fits = [t for t in tables if need <= set(t.definition.attribute_subset)]
    if not fits:
        raise SchemaError(f"no table covers the attributes of target {target}")
    return min(fits, key=lambda t: t.definition.n_rows)


def tract_percentage(
    tables: list[CensusTable],
    target: Predicate,
    schema: AttributeSchema,
    level: str = "tract",
) -> dict[str, float | None]:
    """Percentage of ``target`` per geographic unit at ``level``.

    Target and total counts come from the same table (the smallest one
    that covers the target's attributes). Units whose total is not
    positive map to ``None``.
    """
    table = _target_table(tables, target)
    rows = np.array(
        [all(m.as_dict().get(k) == v for k, v in target.assignments)
         for m in table.definition.marginal_predicates],
        dtype=bool,
    )
    lengths = schema.geo_prefix_lengths
    units = [geo_parent(GeoId(b, "block"), level, lengths).code for b in table.blocks]
    num = table.values[rows].sum(axis=0)
    den = table.values.sum(axis=0)
    tot_num: dict[str, int] = {}
    tot_den: dict[str, int] = {}
    for u, n, d in zip(units, num.tolist(), den.tolist()):
        tot_num[u] = tot_num.get(u, 0) + n
        tot_den[u] = tot_den.get(u, 0) + d
    return {
        u: (100.0 * tot_num[u] / tot_den[u] if tot_den[u] > 0 else None)
        for u in sorted(tot_den)
    }


def smape_per_tract(true_pct: float, noisy_pcts) -> float:
    """``100 * mean(|F - A| / ((|A| + |F|) / 2))`` with 0/0 taken as 0."""
    noisy = list(noisy_pcts)
    if not noisy:
        raise ValueError("need at least one perturbed value")
    a = abs(true_pct)
    terms = []
    for f in noisy:
        denom = (a + abs(f)) / 2
        terms.append(0.0 if denom == 0 else abs(f - true_pct) / denom)
    return 100.0 * math.fsum(terms) / len(terms)


@dataclass
class ErrorRow:
    tract: str
    true_percentage: float
    smape: float
    runs: int


@dataclass
class ErrorMap:
    rows: list[ErrorRow]
    empty: list[tuple[str, str]]
    epsilon: float
    runs: int
    target: str = ""
    notes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tract", "true_percentage", "smape", "runs"])
        for r in self.rows:
            w.writerow([r.tract, repr(r.true_percentage), repr(r.smape), r.runs])
        return buf.getvalue()

    def empty_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tract", "reason"])
        w.writerows(self.empty)
        return buf.getvalue()

    def summary(self) -> dict:
        smapes = [r.smape for r in self.rows]
        out = {"tracts": len(self.rows), "empty_tracts": len(self.empty)}
        if smapes:
            out.update(min=min(smapes), median=statistics.median(smapes), max=max(smapes))
        out["spearman"] = rank_correlation(
            [r.true_percentage for r in self.rows], smapes
        )
        return out


def rank_correlation(a, b) -> float | None:
    """Spearman's rho, or ``None`` when undefined (fewer than 3 points or a constant input)."""
    if len(a) < 3 or len(set(a)) < 2 or len(set(b)) < 2:
        return None
    return float(stats.spearmanr(a, b).statistic)


def error_map(
    tables: list[CensusTable],
    target: Predicate,
    cfg: DpConfig,
    schema: AttributeSchema,
    level: str = "tract",
    threads: int | None = None,
) -> ErrorMap:
    """Per-tract SMAPE of the target percentage over ``cfg.runs`` DP realizations.

    A run in which a tract's perturbed total is not positive is left out of
    that tract's average; ``runs`` in each row counts the runs used.
    """
    truth = tract_percentage(tables, target, schema, level)

    def one_run(i):
        return tract_percentage(perturb_tables(tables, cfg, i), target, schema, level)

    if threads is not None and threads > 1 and cfg.runs > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            noisy = list(pool.map(one_run, range(cfg.runs)))
    else:
        noisy = [one_run(i) for i in range(cfg.runs)]

    rows, empty = [], []
    for tract, a in truth.items():
        if a is None:
            empty.append((tract, "zero population"))
            continue
        fs = [run[tract] for run in noisy if run[tract] is not None]
        if not fs:
            empty.append((tract, "empty in every perturbed run"))
            continue
        rows.append(ErrorRow(tract, a, smape_per_tract(a, fs), len(fs)))
    notes = [
        f"each cell receives independent epsilon={cfg.epsilon} noise; "
        "no privacy budget is split across tables or cells"
    ]
    return ErrorMap(rows, empty, cfg.epsilon, cfg.runs, str(target), notes)

