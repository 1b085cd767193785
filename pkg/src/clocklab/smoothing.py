"""Least-squares fusion of per-link estimates into per-node values.

Link exchanges produce relative quantities (offsets, log-skews, state
estimates) between node pairs; pinning the reference node at zero and
solving the least-squares problem on the graph turns them into
consistent nodal values.  Two routes: a direct solve of the normal
equations (the oracle, and the best linear unbiased combination for
equal link variances), and the asynchronous per-node relaxation that a
deployed network would actually run, which converges to the same fixed
point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SyncGraph",
    "RelativeEstimates",
    "SmoothResult",
    "reduced_incidence",
    "blue_solve",
    "jacobi_step",
    "smooth",
    "write_nodal_csv",
]


@dataclass(frozen=True)
class SyncGraph:
    """Communication graph over nodes {0, ..., n} with reference node 0.

    ``n`` counts the non-reference nodes; ``edges`` are directed pairs
    (the direction fixes the sign convention of the stored estimate:
    the value on (i, j) refers to node j's quantity minus node i's).
    """

    n: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"need at least one non-reference node, got n={self.n!r}")
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))
        for (i, j) in self.edges:
            if i == j:
                raise ValueError(f"self-loop ({i}, {j}) not allowed")
            if not (0 <= i <= self.n and 0 <= j <= self.n):
                raise ValueError(f"edge ({i}, {j}) references nodes outside 0..{self.n}")

    def incident(self, node: int) -> list[tuple[tuple[int, int], int]]:
        """Edges touching ``node`` with the neighbor on each."""
        out = []
        for e in self.edges:
            if e[0] == node:
                out.append((e, e[1]))
            elif e[1] == node:
                out.append((e, e[0]))
        return out

    def is_connected(self) -> bool:
        seen = {0}
        frontier = [0]
        adj: dict[int, list[int]] = {k: [] for k in range(self.n + 1)}
        for (i, j) in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        while frontier:
            u = frontier.pop()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    frontier.append(w)
        return len(seen) == self.n + 1


@dataclass(frozen=True)
class RelativeEstimates:
    """One finite value per directed edge of the graph."""

    values: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        clean = {(int(i), int(j)): float(v) for (i, j), v in self.values.items()}
        for e, v in clean.items():
            if not math.isfinite(v):
                raise ValueError(f"estimate on edge {e} must be finite, got {v!r}")
        object.__setattr__(self, "values", clean)

    def toward(self, edge: tuple[int, int], node: int) -> float:
        """The edge's value oriented *toward* ``node`` (negated if stored away)."""
        v = self.values[edge]
        return v if edge[1] == node else -v


@dataclass(frozen=True)
class SmoothResult:
    values: np.ndarray
    sweeps: int
    converged: bool
    final_delta: float


def reduced_incidence(g: SyncGraph) -> np.ndarray:
    """Edge-by-node matrix with -1 at i and +1 at j, reference column dropped.

    Raises
    ------
    ValueError
        "graph not connected" — the normal equations are singular then.
    """
    if not g.is_connected():
        raise ValueError("graph not connected")
    b = np.zeros((len(g.edges), g.n))
    for r, (i, j) in enumerate(g.edges):
        if i != 0:
            b[r, i - 1] = -1.0
        if j != 0:
            b[r, j - 1] = 1.0
    return b


def _edge_vector(g: SyncGraph, rel: RelativeEstimates) -> np.ndarray:
    try:
        return np.array([rel.values[e] for e in g.edges])
    except KeyError as exc:
        raise ValueError(f"missing relative estimate for edge {exc.args[0]}") from None


def blue_solve(g: SyncGraph, rel: RelativeEstimates) -> np.ndarray:
    """Exact least-squares nodal values (reference pinned at 0).

    Solves ``(B'B) v = B' x`` for the reduced incidence matrix B; the
    residual is orthogonal to the range of B, and consistent inputs
    (exact differences of some potential) are recovered exactly.
    Returns the full vector over nodes 0..n with ``v[0] = 0``.
    """
    b = reduced_incidence(g)
    x = _edge_vector(g, rel)
    v = np.linalg.solve(b.T @ b, b.T @ x)
    return np.concatenate(([0.0], v))


def jacobi_step(i: int, v: np.ndarray, g: SyncGraph, rel: RelativeEstimates) -> float:
    """One node's relaxation: average of neighbor values plus edge estimates.

    ``v_i <- (1/d_i) sum over incident edges of (v_neighbor + estimate
    oriented toward i)``, with d_i the incident edge count (parallel
    edges in both directions each count once, which averages their
    estimates).
    """
    if i == 0:
        raise ValueError("reference node is pinned at zero")
    inc = g.incident(i)
    if not inc:
        raise ValueError(f"isolated node {i}")
    total = 0.0
    for edge, nb in inc:
        total += v[nb] + rel.toward(edge, i)
    return total / len(inc)


def smooth(
    g: SyncGraph,
    rel: RelativeEstimates,
    tol: float = 1e-9,
    max_iter: int = 10_000,
    schedule: str = "random",
    seed: int = 0,
    v0: np.ndarray | None = None,
) -> SmoothResult:
    """Iterate per-node relaxations until the largest change drops below tol.

    ``schedule="sweep"`` visits nodes 1..n in order (deterministic);
    ``"random"`` shuffles the order each sweep, mimicking asynchronous
    operation.  Non-convergence within ``max_iter`` sweeps is flagged
    on the result, not raised.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    if schedule not in ("sweep", "random"):
        raise ValueError(f"unknown schedule {schedule!r}")
    _edge_vector(g, rel)  # validate coverage up front
    v = np.zeros(g.n + 1) if v0 is None else np.asarray(v0, dtype=float).copy()
    v[0] = 0.0
    if math.isinf(tol):  # any change is acceptable: nothing to do
        return SmoothResult(values=v, sweeps=0, converged=True, final_delta=0.0)
    rng = np.random.default_rng(seed)
    order = np.arange(1, g.n + 1)
    delta = math.inf
    for sweep in range(max_iter):
        if schedule == "random":
            rng.shuffle(order)
        delta = 0.0
        for i in order:
            new = jacobi_step(int(i), v, g, rel)
            delta = max(delta, abs(new - v[i]))
            v[i] = new
        if delta < tol:
            return SmoothResult(values=v, sweeps=sweep + 1, converged=True,
                                final_delta=delta)
    return SmoothResult(values=v, sweeps=max_iter, converged=False, final_delta=delta)


def write_nodal_csv(values: np.ndarray, path) -> None:
    """Dump nodal values as CSV: ``node,value``."""
    rows = np.column_stack([np.arange(len(values)), values])
    np.savetxt(path, rows, delimiter=",", header="node,value", comments="",
               fmt=["%d", "%.17g"])
