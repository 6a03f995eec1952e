"""
Constrained de Bruijn codes and the quantized-AoLP stripe pattern.

Symbols ``0..k-1`` map monotonically onto evenly spaced AoLP levels. A
valid sequence never repeats a symbol two places back and never places a
symbol next to itself or a neighbouring level. Neighbouring levels are
taken cyclically (``0`` and ``k-1`` count as adjacent), which is what makes
every node of the constraint graph have in- and out-degree ``k - 4``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, PreconditionError
from .polcore import angular_distance


@dataclass(frozen=True)
class CodeParams:
    k_db: int = 7
    n_db: int = 4
    aolp_min: float = 0.0
    aolp_max: float = 80.0
    stripe_width: int = 12

    def __post_init__(self):
        if self.k_db < 5 or self.n_db < 3:
            raise PreconditionError(f"need k_db >= 5 and n_db >= 3, got k={self.k_db}, n={self.n_db}")
        span = self.aolp_max - self.aolp_min
        if not 0 < span < 90:
            raise PreconditionError(f"AoLP span must lie in (0, 90) degrees, got {span}")
        if self.stripe_width < 1:
            raise PreconditionError("stripe_width must be >= 1")

    @property
    def step(self) -> float:
        return (self.aolp_max - self.aolp_min) / (self.k_db - 1)


def quantize_levels(params: CodeParams) -> np.ndarray:
    return params.aolp_min + np.arange(params.k_db) * params.step


def _forbidden(prev2, prev1, k):
    out = {prev1, (prev1 + 1) % k, (prev1 - 1) % k}
    if prev2 is not None:
        out.add(prev2)
    return out


def admissible(word, k) -> bool:
    """True if ``word`` satisfies both neighbour constraints internally."""
    for j in range(1, len(word)):
        prev2 = word[j - 2] if j >= 2 else None
        if word[j] in _forbidden(prev2, word[j - 1], k):
            return False
    return True


@dataclass
class ConstraintGraph:
    k: int
    n: int
    nodes: list[tuple[int, ...]]
    edges: dict[tuple[int, ...], list[int]]  # node -> sorted appended symbols

    @property
    def edge_count(self) -> int:
        return sum(len(v) for v in self.edges.values())

    def in_degrees(self) -> dict[tuple[int, ...], int]:
        deg = dict.fromkeys(self.nodes, 0)
        for node, syms in self.edges.items():
            for s in syms:
                deg[node[1:] + (s,)] += 1
        return deg


def build_constraint_graph(params: CodeParams | None = None, *, k: int | None = None,
                           n: int | None = None, constrained: bool = True) -> ConstraintGraph:
    """Nodes are admissible (n-1)-words; an edge appends one symbol.

    ``constrained=False`` gives the classic de Bruijn graph (test reference
    only; it skips the k >= 5 check).
    """
    if params is not None:
        k, n = params.k_db, params.n_db
    if k is None or n is None:
        raise PreconditionError("give params or both k and n")
    if constrained and (k < 5 or n < 3):
        raise PreconditionError(f"need k >= 5 and n >= 3, got k={k}, n={n}")
    ok = (lambda w: admissible(w, k)) if constrained else (lambda w: True)
    nodes = [w for w in itertools.product(range(k), repeat=n - 1) if ok(w)]
    edges = {w: [s for s in range(k) if ok(w + (s,))] for w in nodes}
    return ConstraintGraph(k, n, nodes, edges)


def eulerian_sequence(graph: ConstraintGraph) -> np.ndarray:
    """Hierholzer walk from the smallest node, consuming edges in ascending order."""
    remaining = {node: list(reversed(syms)) for node, syms in graph.edges.items()}
    start = min(graph.nodes)
    stack = [start]
    path: list[tuple[int, ...]] = []
    while stack:
        node = stack[-1]
        out = remaining[node]
        if out:
            s = out.pop()
            stack.append(node[1:] + (s,))
        else:
            path.append(stack.pop())
    path.reverse()
    if len(path) != graph.edge_count + 1:
        raise DegenerateError("constraint graph is not connected; no Eulerian path")
    seq = list(path[0]) + [node[-1] for node in path[1:]]
    return np.array(seq, dtype=int)


@dataclass
class SequenceReport:
    window_uniqueness: bool
    adjacency_ok: bool
    coverage_count: int
    violations: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.window_uniqueness and self.adjacency_ok


def validate_sequence(seq, params: CodeParams | None = None, *, k: int | None = None,
                      n: int | None = None) -> SequenceReport:
    if params is not None:
        k, n = params.k_db, params.n_db
    seq = [int(v) for v in seq]
    violations = []
    for j in range(1, len(seq)):
        prev2 = seq[j - 2] if j >= 2 else None
        if seq[j] in _forbidden(prev2, seq[j - 1], k):
            violations.append(j)
    windows = [tuple(seq[j:j + n]) for j in range(len(seq) - n + 1)]
    unique = len(set(windows)) == len(windows)
    return SequenceReport(unique, not violations, len(set(windows)), violations)


@dataclass(frozen=True)
class StripeLayout:
    """Projected stripes of one pattern: AoLP, symbol and centre per stripe.

    ``centers`` are continuous projector x coordinates (pixel ``c`` spans
    ``[c, c + 1)``).
    """

    angles: np.ndarray
    symbols: np.ndarray
    centers: np.ndarray
    starts: np.ndarray
    width: int


@dataclass(frozen=True)
class Codebook:
    params: CodeParams
    levels: np.ndarray
    sequence: np.ndarray

    @classmethod
    def generate(cls, params: CodeParams | None = None) -> "Codebook":
        params = params or CodeParams()
        seq = eulerian_sequence(build_constraint_graph(params))
        return cls(params, quantize_levels(params), seq)

    def column_symbols(self, projector_width: int) -> np.ndarray:
        w = self.params.stripe_width
        if w * len(self.sequence) < projector_width:
            raise PreconditionError(
                f"{len(self.sequence)} stripes of width {w} cannot cover {projector_width} columns")
        return self.sequence[np.arange(projector_width) // w]

    def layout(self, projector_width: int) -> StripeLayout:
        w = self.params.stripe_width
        count = -(-projector_width // w)
        self.column_symbols(projector_width)
        symbols = self.sequence[:count]
        starts = np.arange(count) * w
        return StripeLayout(self.levels[symbols], symbols, starts + 0.5 * w, starts, w)


@dataclass(frozen=True)
class PatternImage:
    """Vertical-stripe polarization pattern; rows are identical.

    ``aolp`` holds one angle per projector column, DoLP is one and the
    intensity is uniform.
    """

    aolp: np.ndarray
    height: int
    intensity: float = 1.0
    dolp: np.ndarray | None = None

    @property
    def width(self) -> int:
        return len(self.aolp)

    def column_stokes(self) -> np.ndarray:
        """Incident linear Stokes per projector column, shape ``(width, 3)``."""
        two = 2.0 * np.radians(self.aolp)
        rho = np.ones_like(two) if self.dolp is None else self.dolp
        i = self.intensity
        return np.stack([np.full_like(two, i), i * rho * np.cos(two), i * rho * np.sin(two)], axis=-1)


def assemble_pattern(codebook: Codebook, projector_width: int, projector_height: int) -> PatternImage:
    symbols = codebook.column_symbols(projector_width)
    return PatternImage(codebook.levels[symbols], projector_height)


def quantize_aolp(observed_aolp, codebook_or_levels):
    """Nearest level index under the periodic metric.

    Scalars beyond half a step give ``None``; arrays use ``-1`` there.
    Exactly half-step ties go to the lower symbol.
    """
    if isinstance(codebook_or_levels, Codebook):
        levels = codebook_or_levels.levels
    else:
        levels = np.asarray(codebook_or_levels, dtype=float)
    half = 0.5 * (levels[1] - levels[0])
    obs = np.asarray(observed_aolp, dtype=float)
    dist = angular_distance(obs[..., None], levels)
    best = np.argmin(dist, axis=-1)  # first minimum -> lower symbol on ties
    dmin = np.take_along_axis(dist, best[..., None], axis=-1)[..., 0]
    out = np.where(dmin <= half + 1e-12, best, -1)
    if out.ndim == 0:
        return None if out < 0 else int(out)
    return out
