"""Nonnegative integer least squares fit of a counts matrix to marginal tables.

The objective ``sum_p ||W_p X - Y_p||^2`` is a sum over the columns of X, so
each block is solved on its own::

    minimize ||A x - y||^2  over integer x >= 0

where ``A`` stacks every table's query matrix and ``y`` stacks the block's
column of every table. Each block goes through three stages: a projected
gradient solve of the continuous relaxation, largest-remainder rounding,
and a best-improvement local search over unit moves. Optional restarts
perturb the rounded point with seeded random transfers.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GuardError
from .schema import PredicateSpace
from .tables import CensusTable, build_query_matrix

log = logging.getLogger(__name__)

# fractional parts are compared on this grid so float noise in the
# relaxation cannot reorder ties
ROUND_DECIMALS = 9
_NO_MOVE = np.iinfo(np.int64).max // 4


@dataclass(frozen=True)
class BlockProblem:
    a_stack: np.ndarray
    y_stack: np.ndarray
    block: str = ""

    def __post_init__(self):
        a = np.asarray(self.a_stack, dtype=np.int64)
        y = np.asarray(self.y_stack, dtype=np.int64).reshape(-1)
        if a.ndim != 2 or a.shape[0] != y.shape[0]:
            raise DimensionError(f"A has shape {a.shape} but y has length {y.shape[0]}")
        if a.size and not np.isin(a, (0, 1)).all():
            raise ValueError("A entries must be 0 or 1")
        if (y < 0).any():
            raise ValueError("y entries must be nonnegative")
        object.__setattr__(self, "a_stack", a)
        object.__setattr__(self, "y_stack", y)

    @property
    def k(self) -> int:
        return self.a_stack.shape[1]


@dataclass(frozen=True)
class SolveConfig:
    max_local_search_iters: int | None = None  # None means 10 * K
    restarts: int = 3
    relaxation_tolerance: float = 1e-8
    relaxation_max_iters: int = 5000
    rng_seed: int = 0
    # also try pairs of moves when no single move improves
    lookahead: bool = True

    def __post_init__(self):
        if self.max_local_search_iters is not None and self.max_local_search_iters <= 0:
            raise ValueError("max_local_search_iters must be positive")
        if self.restarts <= 0 or self.relaxation_max_iters <= 0:
            raise ValueError("restarts and relaxation_max_iters must be positive")
        if not self.relaxation_tolerance > 0:
            raise ValueError("relaxation_tolerance must be positive")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    def ls_iters(self, k: int) -> int:
        return self.max_local_search_iters or 10 * k


@dataclass
class SolveResult:
    x: np.ndarray
    objective: int
    iterations_used: int
    converged_to_zero: bool = field(init=False)
    relaxation_iterations: int = 0
    relaxation_objective: float = math.nan

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.objective = int(self.objective)
        self.converged_to_zero = self.objective == 0


@dataclass
class CountsMatrix:
    values: np.ndarray
    space: PredicateSpace
    blocks: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values)
        if not np.issubdtype(v.dtype, np.integer):
            raise TypeError("counts must be integers")
        if v.shape != (len(self.space), len(self.blocks)):
            raise DimensionError(
                f"counts shape {v.shape} does not match {len(self.space)} predicates "
                f"x {len(self.blocks)} blocks"
            )
        if v.size and v.min() < 0:
            raise ValueError("counts must be nonnegative")
        self.values = v.astype(np.int64, copy=False)
        self.blocks = tuple(self.blocks)

    @property
    def total(self) -> int:
        return int(self.values.sum())


def objective(x, p: BlockProblem) -> int:
    """``||A x - y||^2`` computed exactly in integers."""
    x = np.asarray(x)
    if x.shape != (p.k,):
        raise DimensionError(f"x has shape {x.shape}, expected ({p.k},)")
    r = p.a_stack @ x.astype(np.int64) - p.y_stack
    return sum(v * v for v in r.tolist())


def _lipschitz(a: np.ndarray) -> float:
    # ||A||_1 * ||A||_inf bounds the largest eigenvalue of A^T A
    if a.size == 0:
        return 0.0
    return float(np.abs(a).sum(axis=0).max() * np.abs(a).sum(axis=1).max())


def _relax_batch(a: np.ndarray, y: np.ndarray, cfg: SolveConfig):
    """Projected gradient on every column of ``y`` at once.

    Each column stops on its own criterion and is frozen afterwards, so a
    column's iterates do not depend on which other columns share the batch.
    Returns ``(x, iterations, objectives)``.
    """
    a = a.astype(np.float64)
    y = y.astype(np.float64)
    k, n = a.shape[1], y.shape[1]
    x = np.zeros((k, n))
    iters = np.zeros(n, dtype=np.int64)
    L = _lipschitz(a)
    r = -y
    obj = np.einsum("ij,ij->j", r, r)
    if L == 0 or n == 0:
        return x, iters, obj
    active = np.arange(n)
    at = a.T
    xa, ya, ra, oa = x, y, r, obj.copy()
    for _ in range(cfg.relaxation_max_iters):
        xa = np.maximum(xa - (at @ ra) / L, 0.0)
        ra = a @ xa - ya
        on = np.einsum("ij,ij->j", ra, ra)
        keep = (oa - on) >= cfg.relaxation_tolerance
        oa = on
        iters[active] += 1
        if not keep.all():
            x[:, active] = xa
            obj[active] = oa
            active, xa, ya, ra, oa = active[keep], xa[:, keep], ya[:, keep], ra[:, keep], oa[keep]
            if active.size == 0:
                break
    else:
        x[:, active] = xa
        obj[active] = oa
    return x, iters, obj


def solve_relaxation(p: BlockProblem, cfg: SolveConfig | None = None) -> np.ndarray:
    """Approximate nonnegative least squares minimizer (real-valued)."""
    cfg = cfg or SolveConfig()
    x, _, _ = _relax_batch(p.a_stack, p.y_stack[:, None], cfg)
    return x[:, 0]


def round_counts(xr, p: BlockProblem | None = None) -> np.ndarray:
    """Largest-remainder rounding preserving ``round(sum(xr))``.

    Ties in the fractional part go to the lower index.
    """
    xr = np.round(np.asarray(xr, dtype=np.float64), ROUND_DECIMALS)
    if p is not None and xr.shape != (p.k,):
        raise DimensionError(f"xr has shape {xr.shape}, expected ({p.k},)")
    if (xr < 0).any():
        raise ValueError("xr must be nonnegative")
    floors = np.floor(xr)
    target = int(math.floor(float(xr.sum()) + 0.5))
    out = floors.astype(np.int64)
    extra = target - int(out.sum())
    if extra > 0:
        frac = np.round(xr - floors, ROUND_DECIMALS)
        # stable sort on -frac keeps lower indices first among equal fractions
        order = np.argsort(-frac, kind="stable")
        out[order[:extra]] += 1
    return out


class _MoveTable:
    """Objective changes of every unit move, in exact integer arithmetic.

    With residual ``r = A x - y`` and ``g = A^T r``, adding one to ``x_k``
    changes the objective by ``2 g_k + q_kk``; the removal and transfer
    deltas follow the same way from ``Q = A^T A``. Moves are indexed in
    scan order: adds ``0..K-1``, removals ``K..2K-1``, then transfers
    ``(src, dst)`` row-major, and ties go to the lowest index.
    """

    def __init__(self, p: BlockProblem):
        a = p.a_stack
        self.k = a.shape[1]
        self.a = a
        self.y = p.y_stack
        self.q = a.T @ a
        self.diag = np.diag(self.q).copy()
        c = self.diag[:, None] + self.diag[None, :] - 2 * self.q
        np.fill_diagonal(c, _NO_MOVE)
        self.transfer_const = c
        self.aty = a.T @ self.y

    def deltas(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        pos = x > 0
        add = 2 * g + self.diag
        rem = np.where(pos, self.diag - 2 * g, _NO_MOVE)
        tr = np.where(pos[:, None], 2 * (g[None, :] - g[:, None]) + self.transfer_const, _NO_MOVE)
        return np.concatenate((add, rem, tr.ravel()))

    def apply(self, x: np.ndarray, g: np.ndarray, move: int) -> None:
        k = self.k
        if move < k:
            x[move] += 1
            g += self.q[:, move]
        elif move < 2 * k:
            x[move - k] -= 1
            g -= self.q[:, move - k]
        else:
            src, dst = divmod(move - 2 * k, k)
            x[src] -= 1
            x[dst] += 1
            g += self.q[:, dst] - self.q[:, src]

    def lookahead(self, x: np.ndarray, g: np.ndarray, first: np.ndarray):
        """Best improving pair of moves whose first move is the least-bad single move.

        Only the ``2K`` cheapest first moves are expanded. Returns
        ``(total_delta, (m1, m2))`` or ``None``.
        """
        order = np.argsort(first, kind="stable")
        order = order[first[order] < _NO_MOVE][: 2 * self.k]
        best = None
        for m1 in order.tolist():
            x1, g1 = x.copy(), g.copy()
            self.apply(x1, g1, m1)
            second = self.deltas(x1, g1)
            m2 = int(np.argmin(second))
            total = int(first[m1]) + int(second[m2])
            if total < 0 and (best is None or total < best[0]):
                best = (total, (m1, m2))
        return best

    def search(self, x0: np.ndarray, max_iters: int, lookahead: bool = True):
        x = x0.astype(np.int64, copy=True)
        r = self.a @ x - self.y
        obj = int(r @ r)
        g = self.q @ x - self.aty
        used = 0
        while used < max_iters and obj > 0:
            deltas = self.deltas(x, g)
            best = int(np.argmin(deltas))
            delta = int(deltas[best])
            if delta < 0:
                self.apply(x, g, best)
            else:
                pair = self.lookahead(x, g, deltas) if lookahead else None
                if pair is None:
                    break
                delta, (m1, m2) = pair
                self.apply(x, g, m1)
                self.apply(x, g, m2)
            obj += delta
            used += 1
        return x, obj, used


def local_search(x0, p: BlockProblem, cfg: SolveConfig | None = None) -> SolveResult:
    """Best-improvement descent over +1, -1 and unit-transfer moves.

    Each iteration applies the single move with the most negative objective
    change. When none improves and ``cfg.lookahead`` is set, the best
    improving pair of moves is applied instead; the search stops when
    neither exists or after ``cfg.ls_iters(K)`` iterations.
    """
    cfg = cfg or SolveConfig()
    x0 = np.asarray(x0)
    if x0.shape != (p.k,):
        raise DimensionError(f"x0 has shape {x0.shape}, expected ({p.k},)")
    if (x0 < 0).any():
        raise ValueError("x0 must be nonnegative")
    x, obj, used = _MoveTable(p).search(x0, cfg.ls_iters(p.k), cfg.lookahead)
    return SolveResult(x, obj, used)


def _compositions(k: int, bound: int):
    """All nonnegative integer k-vectors with sum <= bound, in lexicographic order."""
    if k == 0:
        yield ()
        return
    for first in range(bound + 1):
        for rest in _compositions(k - 1, bound - first):
            yield (first,) + rest


def brute_force_block(p: BlockProblem, total_bound: int) -> SolveResult:
    """Exact minimizer over ``sum(x) <= total_bound`` by enumeration.

    Ties resolve to the lexicographically smallest vector.
    """
    if p.k > 8 or total_bound > 6 or total_bound < 0:
        raise GuardError(
            f"brute force limited to K <= 8 and 0 <= total_bound <= 6 (got K={p.k}, "
            f"total_bound={total_bound})"
        )
    xs = np.array(list(_compositions(p.k, total_bound)), dtype=np.int64).reshape(-1, p.k)
    r = xs @ p.a_stack.T - p.y_stack[None, :]
    objs = (r * r).sum(axis=1)
    best = int(np.argmin(objs))
    return SolveResult(xs[best], int(objs[best]), len(xs))


def block_seed(seed: int, block: str) -> int:
    """Per-block seed: ``seed`` XOR a stable 64-bit hash of the block code."""
    h = int.from_bytes(hashlib.blake2b(block.encode(), digest_size=8).digest(), "little")
    return (seed ^ h) & (2**64 - 1)


def _perturb(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = x.copy()
    k = x.shape[0]
    if k < 2:
        return x
    for src, dst in rng.integers(0, k, size=(2 * k, 2)).tolist():
        if src != dst and x[src] > 0:
            x[src] -= 1
            x[dst] += 1
    return x


def _finish_block(p: BlockProblem, xr: np.ndarray, relax_iters: int, relax_obj: float,
                  cfg: SolveConfig) -> SolveResult:
    moves = _MoveTable(p)
    max_iters = cfg.ls_iters(p.k)
    x0 = round_counts(xr, p)
    best_x, best_obj, used = moves.search(x0, max_iters, cfg.lookahead)
    total_used = used
    if best_obj > 0 and cfg.restarts > 1:
        rng = np.random.default_rng(block_seed(cfg.rng_seed, p.block))
        for _ in range(cfg.restarts - 1):
            x, obj, used = moves.search(_perturb(x0, rng), max_iters, cfg.lookahead)
            total_used += used
            if obj < best_obj:
                best_x, best_obj = x, obj
            if best_obj == 0:
                break
    return SolveResult(best_x, best_obj, total_used, relax_iters, relax_obj)


def solve_block(p: BlockProblem, cfg: SolveConfig | None = None) -> SolveResult:
    """Relaxation, rounding, local search, then seeded restarts if still nonzero."""
    cfg = cfg or SolveConfig()
    xr, iters, objs = _relax_batch(p.a_stack, p.y_stack[:, None], cfg)
    return _finish_block(p, xr[:, 0], int(iters[0]), float(objs[0]), cfg)


def stack_tables(tables: list[CensusTable], space: PredicateSpace):
    """Stacked query matrix ``A`` and stacked table values ``Y`` (one column per block)."""
    if not tables:
        raise ValueError("need at least one table")
    blocks = tables[0].blocks
    for t in tables[1:]:
        if t.blocks != blocks:
            raise DimensionError(f"table {t.name!r} uses a different block ordering")
    a = np.vstack([build_query_matrix(t.definition, space).entries for t in tables])
    y = np.vstack([t.values for t in tables])
    return a, y


def solve_all(
    tables: list[CensusTable],
    space: PredicateSpace,
    cfg: SolveConfig | None = None,
    threads: int | None = None,
) -> tuple[CountsMatrix, list[SolveResult]]:
    """Solve every block and assemble the counts matrix.

    Output does not depend on ``threads``: each block's result is a function
    of its own column of the tables, its code and ``cfg`` only.
    """
    cfg = cfg or SolveConfig()
    a, y = stack_tables(tables, space)
    blocks = tables[0].blocks
    xr, iters, objs = _relax_batch(a, y, cfg)
    problems = [BlockProblem(a, y[:, j], blocks[j]) for j in range(len(blocks))]

    def run(j):
        return _finish_block(problems[j], xr[:, j], int(iters[j]), float(objs[j]), cfg)

    if threads is not None and threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(blocks))))
    else:
        results = [run(j) for j in range(len(blocks))]

    values = np.zeros((len(space), len(blocks)), dtype=np.int64)
    for j, res in enumerate(results):
        values[:, j] = res.x
    if (values < 0).any():
        raise AssertionError("solver produced a negative count")
    n_exact = sum(r.converged_to_zero for r in results)
    log.info("solved %d blocks, %d exact fits", len(blocks), n_exact)
    return CountsMatrix(values, space, blocks), results


def total_objective(tables: list[CensusTable], x: CountsMatrix) -> int:
    """The full objective ``sum_p ||W_p X - Y_p||^2``, exact in integers."""
    total = 0
    for t in tables:
        w = build_query_matrix(t.definition, x.space).entries
        r = w @ x.values - t.values
        total += sum(v * v for v in r.ravel().tolist())
    return total


def summary_csv(blocks, results: list[SolveResult]) -> str:
    lines = ["block,objective,iterations,converged"]
    for b, r in zip(blocks, results):
        lines.append(f"{b},{r.objective},{r.iterations_used},{str(r.converged_to_zero).lower()}")
    return "\n".join(lines) + "\n"
