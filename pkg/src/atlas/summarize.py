"""Offline map summarization.

Selecting which landmarks to keep is a 0/1 program: keep exactly
`keep_count` landmarks, minimizing total landmark cost plus a penalty for
every missing observation below `min_per_vertex` at any vertex:

    minimize    cost . x  +  slack_penalty * sum(z)
    subject to  sum(x) == keep_count
                A x + z >= min_per_vertex   (per vertex)
                x in {0,1},  z >= 0 integer

where A is the binary vertex-by-landmark co-observability matrix.  Because
the slack z has a closed form once x is fixed (z_v = max(0, b - (Ax)_v)),
the problem reduces to choosing a fixed-size subset, which a small
branch-and-bound solves exactly and a two-phase greedy approximates at map
scale.  Landmark cost rewards having been observed in many sessions and
often: cost_i = 1 / (1 + n_sessions_i + obs_weight * n_observations_i).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from atlas.mapcore import MultiSessionMap

DEFAULT_MIN_PER_VERTEX = 3
DEFAULT_SLACK_PENALTY = 1.0
DEFAULT_OBS_WEIGHT = 0.1
# Largest instance handed to the exact solver by the sortie pipeline.
EXACT_SIZE_LIMIT = 30

_TIE_EPS = 1e-12


class StaleSolutionError(ValueError):
    """The map changed between building the problem and applying the solution."""


def _map_stamp(m: MultiSessionMap) -> tuple:
    return (id(m), m.version, len(m.landmarks), len(m.vertices), len(m.sessions))


@dataclass
class SummarizationProblem:
    """One summarization instance over N landmarks and M vertices."""

    costs: np.ndarray  # (N,) positive
    landmark_vertices: list[np.ndarray]  # per landmark, row indices it covers
    n_vertices: int
    keep_count: int
    min_per_vertex: int = DEFAULT_MIN_PER_VERTEX
    slack_penalty: float = DEFAULT_SLACK_PENALTY
    landmark_ids: tuple[int, ...] | None = None  # map binding, optional
    vertex_ids: tuple[int, ...] | None = None
    map_stamp: tuple | None = None

    def __post_init__(self) -> None:
        self.costs = np.asarray(self.costs, dtype=np.float64)
        n = len(self.costs)
        if n == 0:
            raise ValueError("problem needs at least one landmark")
        if not np.all(np.isfinite(self.costs)) or np.any(self.costs <= 0):
            raise ValueError("costs must be positive and finite")
        if len(self.landmark_vertices) != n:
            raise ValueError("one coverage column per landmark required")
        cols = []
        for j, col in enumerate(self.landmark_vertices):
            col = np.unique(np.asarray(col, dtype=np.int64))
            if len(col) == 0:
                raise ValueError(f"landmark {j} covers no vertex")
            if col[0] < 0 or col[-1] >= self.n_vertices:
                raise ValueError(f"landmark {j} references a vertex out of range")
            cols.append(col)
        self.landmark_vertices = cols
        if not 1 <= self.keep_count <= n:
            raise ValueError("keep_count must satisfy 1 <= keep_count <= n_landmarks")
        if self.min_per_vertex < 1:
            raise ValueError("min_per_vertex must be >= 1")
        if self.slack_penalty < 0:
            raise ValueError("slack_penalty must be >= 0")

    @property
    def n_landmarks(self) -> int:
        return len(self.costs)

    def vertex_rows(self) -> list[np.ndarray]:
        """Per vertex, the ascending indices of landmarks covering it."""
        rows: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for j, col in enumerate(self.landmark_vertices):
            for v in col:
                rows[int(v)].append(j)
        return [np.asarray(r, dtype=np.int64) for r in rows]

    def coverage(self, kept: Sequence[int]) -> np.ndarray:
        cov = np.zeros(self.n_vertices, dtype=np.int64)
        for j in kept:
            cov[self.landmark_vertices[int(j)]] += 1
        return cov

    def slack(self, kept: Sequence[int]) -> np.ndarray:
        """Closed-form optimal slack for a fixed keep set."""
        return np.maximum(0, self.min_per_vertex - self.coverage(kept))

    def objective(self, kept: Sequence[int]) -> float:
        kept = np.asarray(list(kept), dtype=np.int64)
        return float(self.costs[kept].sum() + self.slack_penalty * self.slack(kept).sum())

    def to_json(self) -> str:
        doc = {
            "q": [float(c) for c in self.costs],
            "A": {"rows": [[int(j) for j in row] for row in self.vertex_rows()]},
            "n_desired": self.keep_count,
            "b": self.min_per_vertex,
            "lambda": self.slack_penalty,
        }
        return json.dumps(doc, sort_keys=True)


def problem_from_json(text: str) -> SummarizationProblem:
    doc = json.loads(text)
    rows = doc["A"]["rows"]
    n = len(doc["q"])
    cols: list[list[int]] = [[] for _ in range(n)]
    for v, row in enumerate(rows):
        for j in row:
            cols[int(j)].append(v)
    return SummarizationProblem(
        costs=np.asarray(doc["q"], dtype=np.float64),
        landmark_vertices=[np.asarray(c, dtype=np.int64) for c in cols],
        n_vertices=len(rows),
        keep_count=int(doc["n_desired"]),
        min_per_vertex=int(doc["b"]),
        slack_penalty=float(doc["lambda"]),
    )


@dataclass
class SummarizationSolution:
    keep: np.ndarray  # ascending landmark indices, len == keep_count
    slack: np.ndarray  # (M,)
    objective: float
    exact: bool
    keep_ids: tuple[int, ...] | None = None  # map-bound ids, when available
    map_stamp: tuple | None = None


def _finish(problem: SummarizationProblem, kept: np.ndarray, exact: bool) -> SummarizationSolution:
    kept = np.sort(np.asarray(kept, dtype=np.int64))
    keep_ids = None
    if problem.landmark_ids is not None:
        keep_ids = tuple(problem.landmark_ids[int(j)] for j in kept)
    return SummarizationSolution(
        keep=kept,
        slack=problem.slack(kept),
        objective=problem.objective(kept),
        exact=exact,
        keep_ids=keep_ids,
        map_stamp=problem.map_stamp,
    )


# -- Cost and coverage from a map --


def build_cost_vector(
    m: MultiSessionMap, obs_weight: float = DEFAULT_OBS_WEIGHT
) -> tuple[tuple[int, ...], np.ndarray]:
    """(landmark ids ascending, costs).  Lower cost = more worth keeping."""
    ids = tuple(sorted(m.landmarks))
    costs = np.array(
        [
            1.0 / (1.0 + len(m.landmarks[i].sessions) + obs_weight * m.landmarks[i].total_observations)
            for i in ids
        ]
    )
    return ids, costs


def build_coobservability(
    m: MultiSessionMap,
) -> tuple[tuple[int, ...], tuple[int, ...], list[np.ndarray]]:
    """(vertex ids, landmark ids, per-landmark covered vertex rows).

    Row/column order is ascending id.  An empty map yields a 0 x 0 matrix.
    """
    vertex_ids = tuple(sorted(m.vertices))
    landmark_ids = tuple(sorted(m.landmarks))
    vrow = {vid: r for r, vid in enumerate(vertex_ids)}
    cols = [
        np.asarray(sorted(vrow[vid] for vid in m.landmarks[lid].obs_counts), dtype=np.int64)
        for lid in landmark_ids
    ]
    return vertex_ids, landmark_ids, cols


def build_problem(
    m: MultiSessionMap,
    keep_count: int,
    min_per_vertex: int = DEFAULT_MIN_PER_VERTEX,
    slack_penalty: float = DEFAULT_SLACK_PENALTY,
    obs_weight: float = DEFAULT_OBS_WEIGHT,
) -> SummarizationProblem:
    vertex_ids, landmark_ids, cols = build_coobservability(m)
    _, costs = build_cost_vector(m, obs_weight)
    return SummarizationProblem(
        costs=costs,
        landmark_vertices=cols,
        n_vertices=len(vertex_ids),
        keep_count=keep_count,
        min_per_vertex=min_per_vertex,
        slack_penalty=slack_penalty,
        landmark_ids=landmark_ids,
        vertex_ids=vertex_ids,
        map_stamp=_map_stamp(m),
    )


# -- Solvers --


def solve_exact(problem: SummarizationProblem) -> SummarizationSolution:
    """Branch and bound over the keep set.  Deterministic: among optima it
    returns the lexicographically smallest keep vector.

    Nodes branch in landmark order with the include branch first, so keep
    sets are reached in ascending lexicographic order and only strict
    improvements replace the incumbent.  The bound combines the
    cheapest possible completion of the budget with a per-vertex coverage
    bound (a vertex cannot gain more coverage than the smaller of the
    remaining budget and its remaining covering landmarks).
    """
    n, m = problem.n_landmarks, problem.n_vertices
    q = problem.costs
    b = problem.min_per_vertex
    lam = problem.slack_penalty
    cols = problem.landmark_vertices
    # fill_cost[i][r]: cheapest cost of r more picks from suffix i.
    fill_cost = []
    for i in range(n + 1):
        sq = np.sort(q[i:])
        fill_cost.append(np.concatenate(([0.0], np.cumsum(sq))))
    # free_deg[i]: per vertex, how many landmarks with index >= i cover it.
    free_deg = np.zeros((n + 1, m), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        free_deg[i] = free_deg[i + 1]
        free_deg[i][cols[i]] += 1

    best_obj = np.inf
    best_keep: np.ndarray | None = None
    cov = np.zeros(m, dtype=np.int64)
    prefix: list[int] = []

    def visit(i: int, in_cost: float) -> None:
        nonlocal best_obj, best_keep
        need = problem.keep_count - len(prefix)
        if need == 0:
            # Only the all-zero suffix is feasible from here.
            obj = in_cost + lam * float(np.maximum(0, b - cov).sum())
            if obj < best_obj - _TIE_EPS:
                best_obj = obj
                best_keep = np.array(prefix, dtype=np.int64)
            return
        if n - i < need:
            return
        bound = in_cost + float(fill_cost[i][need])
        if lam > 0:
            reachable = cov + np.minimum(need, free_deg[i])
            bound += lam * float(np.maximum(0, b - reachable).sum())
        if bound >= best_obj - _TIE_EPS:
            return
        prefix.append(i)  # include first: keep sets arrive in lex order
        cov[cols[i]] += 1
        visit(i + 1, in_cost + float(q[i]))
        cov[cols[i]] -= 1
        prefix.pop()
        visit(i + 1, in_cost)

    visit(0, 0.0)
    assert best_keep is not None  # keep_count <= n guarantees feasibility
    return _finish(problem, best_keep, exact=True)


def solve_greedy(problem: SummarizationProblem) -> SummarizationSolution:
    """Two-phase greedy: cover each vertex with its cheapest landmarks, then
    fill (or trim) to the exact budget.  Always feasible, never better than
    the exact optimum."""
    n = problem.n_landmarks
    q = problem.costs
    b = problem.min_per_vertex
    lam = problem.slack_penalty
    cols = problem.landmark_vertices
    rows = problem.vertex_rows()
    kept = np.zeros(n, dtype=bool)
    cov = np.zeros(problem.n_vertices, dtype=np.int64)
    for v in range(problem.n_vertices):
        if cov[v] >= b:
            continue
        row = rows[v]
        for j in row[np.argsort(q[row], kind="stable")]:
            if cov[v] >= b:
                break
            if not kept[j]:
                kept[j] = True
                cov[cols[j]] += 1
    n_kept = int(kept.sum())
    if n_kept < problem.keep_count:
        order = np.lexsort((np.arange(n), q))
        for j in order:
            if n_kept == problem.keep_count:
                break
            if not kept[j]:
                kept[j] = True
                cov[cols[j]] += 1
                n_kept += 1
    elif n_kept > problem.keep_count:
        # Evict the landmark whose removal improves the objective most
        # (its cost minus the slack penalty it would newly incur).
        def gain(j: int) -> float:
            return float(q[j]) - lam * int(np.count_nonzero(cov[cols[j]] <= b))

        heap = [(-gain(int(j)), int(j)) for j in np.flatnonzero(kept)]
        heapq.heapify(heap)
        while n_kept > problem.keep_count:
            neg, j = heapq.heappop(heap)
            if not kept[j]:
                continue
            g = gain(j)
            if -neg > g + 1e-15:  # stale entry, re-rank
                heapq.heappush(heap, (-g, j))
                continue
            kept[j] = False
            cov[cols[j]] -= 1
            n_kept -= 1
    return _finish(problem, np.flatnonzero(kept), exact=False)


def solve(problem: SummarizationProblem, exact_limit: int = EXACT_SIZE_LIMIT) -> SummarizationSolution:
    if problem.n_landmarks <= exact_limit:
        return solve_exact(problem)
    return solve_greedy(problem)


def apply_summarization(m: MultiSessionMap, solution: SummarizationSolution) -> MultiSessionMap:
    """Return a copy of the map keeping only the solution's landmarks.

    The solution must have been built from this map in its current state;
    anything else raises StaleSolutionError.  Vertices and sessions are
    retained even when they end up with no landmarks.
    """
    if solution.keep_ids is None or solution.map_stamp is None:
        raise StaleSolutionError("solution is not bound to a map")
    if solution.map_stamp != _map_stamp(m):
        raise StaleSolutionError("map changed since the problem was built")
    keep = set(solution.keep_ids)
    out = m.copy()
    out.drop_landmarks([lid for lid in sorted(out.landmarks) if lid not in keep])
    return out
