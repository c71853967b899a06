from __future__ import annotations
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from srcid.errors import MeshError
from srcid.logger import logger as app_logger, attach_to_logger_names

attach_to_logger_names(["srcid.services.mesh"])

Bounds = Tuple[float, float, float, float]  # (x0, x1, y0, y1)

# max/min edge length allowed for a refinement family
QUASI_UNIFORM_RATIO = 8.0

_SIDE_RE = re.compile(r"^\s*([xy])\s*=\s*([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)\s*$")
_NAMED_SIDES = {"bottom", "top", "left", "right"}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Conforming 2D triangulation with tagged boundary edges.

    nodes          (N, 2) float coordinates
    triangles      (T, 3) node indices, counterclockwise
    boundary_edges (E, 2) node indices, oriented like their triangle
    gamma          (E,)   True where the edge belongs to the observation part
    h              max edge length
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    gamma: np.ndarray
    h: float
    bounds: Bounds = field(default=(0.0, 0.0, 0.0, 0.0))

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(np.asarray(self.nodes, dtype=float)))
        object.__setattr__(self, "triangles", _frozen(np.asarray(self.triangles, dtype=np.int64)))
        object.__setattr__(self, "boundary_edges", _frozen(np.asarray(self.boundary_edges, dtype=np.int64)))
        object.__setattr__(self, "gamma", _frozen(np.asarray(self.gamma, dtype=bool)))

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @property
    def edge_lengths(self) -> np.ndarray:
        e = self.nodes[self.boundary_edges]
        return np.hypot(*(e[:, 1] - e[:, 0]).T)

    @property
    def gamma_edges(self) -> np.ndarray:
        return self.boundary_edges[self.gamma]

    @property
    def gamma_nodes(self) -> np.ndarray:
        return np.unique(self.gamma_edges.ravel())

    @property
    def gamma_length(self) -> float:
        return float(self.edge_lengths[self.gamma].sum())

    def all_edges(self) -> np.ndarray:
        """Unique undirected edges (sorted pairs) of the triangulation."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def edge_length_range(self) -> Tuple[float, float]:
        e = self.all_edges()
        lengths = np.hypot(*(self.nodes[e[:, 1]] - self.nodes[e[:, 0]]).T)
        return float(lengths.min()), float(lengths.max())

    def validate(self) -> "Mesh":
        """Check the triangulation invariants; raises MeshError on the first violation."""
        n = self.n_nodes
        if self.triangles.size == 0:
            raise MeshError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= n:
            raise MeshError("triangle references a missing node")
        if self.boundary_edges.size and (self.boundary_edges.min() < 0 or self.boundary_edges.max() >= n):
            raise MeshError("boundary edge references a missing node")
        if np.any(self.areas <= 0.0):
            raise MeshError("triangle with non-positive signed area")
        used = np.zeros(n, dtype=bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            raise MeshError(f"{int((~used).sum())} orphan node(s)")

        # an edge on the topological boundary belongs to exactly one triangle
        t = self.triangles
        directed = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        undirected, counts = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-conforming triangulation: edge shared by more than two triangles")
        topo = {tuple(e) for e in undirected[counts == 1]}
        tagged = {tuple(sorted(e)) for e in self.boundary_edges.tolist()}
        if len(tagged) != len(self.boundary_edges) or tagged != topo:
            raise MeshError("boundary edges do not match the topological boundary")
        if len(self.gamma) != len(self.boundary_edges):
            raise MeshError("one gamma tag per boundary edge is required")
        return self


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------
def build_rect_mesh(bounds: Sequence[float], n: int) -> Mesh:
    """
    Structured triangulation of an axis-aligned rectangle: (n+1)^2 nodes, each cell split along
    its (x0,y0)-(x1,y1) diagonal. Boundary edges start untagged (gamma all False).
    """
    if int(n) != n or n < 1:
        raise MeshError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    x0, x1, y0, y1 = (float(v) for v in bounds)
    if not (x1 > x0 and y1 > y0) or not all(map(math.isfinite, (x0, x1, y0, y1))):
        raise MeshError(f"degenerate bounds {tuple(bounds)!r}")
    dx, dy = (x1 - x0) / n, (y1 - y0) / n
    if math.hypot(dx, dy) / min(dx, dy) > QUASI_UNIFORM_RATIO:
        raise MeshError(f"aspect ratio of {tuple(bounds)!r} breaks quasi-uniformity")

    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys)  # row j = y_j
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def idx(i, j):
        return j * (n + 1) + i

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([a, b, c])
    tris[1::2] = np.column_stack([a, c, d])

    k = np.arange(n)
    bottom = np.column_stack([idx(k, 0), idx(k + 1, 0)])
    right = np.column_stack([idx(n, k), idx(n, k + 1)])
    top = np.column_stack([idx(k + 1, n), idx(k, n)])
    left = np.column_stack([idx(0, k + 1), idx(0, k)])
    edges = np.vstack([bottom, right, top, left])

    mesh = Mesh(nodes=nodes, triangles=tris, boundary_edges=edges,
                gamma=np.zeros(len(edges), dtype=bool), h=math.hypot(dx, dy),
                bounds=(x0, x1, y0, y1))
    app_logger.debug("build_rect_mesh n=%d nodes=%d triangles=%d h=%.6g",
                     n, mesh.n_nodes, mesh.n_triangles, mesh.h)
    return mesh.validate()


def subdivisions_for_h(bounds: Sequence[float], h: float) -> int:
    """Smallest n whose cell diagonal does not exceed h."""
    if h <= 0:
        raise MeshError(f"mesh size must be positive, got {h!r}")
    x0, x1, y0, y1 = (float(v) for v in bounds)
    return max(1, math.ceil(math.hypot(x1 - x0, y1 - y0) / h - 1e-12))


def refine(mesh: Mesh) -> Mesh:
    """
    Red refinement: every triangle split into 4 congruent children through its edge midpoints.
    Parent nodes keep their indices; midpoints are appended. Boundary tags are inherited.
    """
    t = mesh.triangles
    n0 = mesh.n_nodes
    edges = mesh.all_edges()
    mid_nodes = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])

    # (min, max) -> midpoint index via a flat key
    keys = edges[:, 0] * n0 + edges[:, 1]
    order = np.argsort(keys)
    sorted_keys = keys[order]

    def midpoint(a, b):
        k = np.minimum(a, b) * n0 + np.maximum(a, b)
        return n0 + order[np.searchsorted(sorted_keys, k)]

    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
    children = np.empty((4 * len(t), 3), dtype=np.int64)
    children[0::4] = np.column_stack([a, ab, ca])
    children[1::4] = np.column_stack([ab, b, bc])
    children[2::4] = np.column_stack([ca, bc, c])
    children[3::4] = np.column_stack([ab, bc, ca])

    be = mesh.boundary_edges
    m = midpoint(be[:, 0], be[:, 1])
    new_edges = np.empty((2 * len(be), 2), dtype=np.int64)
    new_edges[0::2] = np.column_stack([be[:, 0], m])
    new_edges[1::2] = np.column_stack([m, be[:, 1]])
    new_gamma = np.repeat(mesh.gamma, 2)

    fine = Mesh(nodes=np.vstack([mesh.nodes, mid_nodes]), triangles=children,
                boundary_edges=new_edges, gamma=new_gamma, h=mesh.h / 2.0, bounds=mesh.bounds)
    app_logger.debug("refine nodes %d -> %d, h=%.6g", n0, fine.n_nodes, fine.h)
    return fine.validate()


# ---------------------------------------------------------------------------
# boundary tagging
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BoundarySpec:
    """
    Which boundary edges form the observation part Gamma.

    `sides` holds "all", a named side (bottom/top/left/right) or a line "x = v" / "y = v";
    several entries are united.
    """

    sides: Tuple[str, ...] = ("all",)

    @classmethod
    def parse(cls, text: Union[str, Iterable[str], "BoundarySpec"]) -> "BoundarySpec":
        if isinstance(text, BoundarySpec):
            return text
        parts = [text] if isinstance(text, str) else list(text)
        sides = []
        for part in parts:
            sides.extend(s.strip() for s in str(part).split(",") if s.strip())
        if not sides:
            raise MeshError("empty boundary specification")
        for s in sides:
            if s.lower() not in _NAMED_SIDES | {"all"} and not _SIDE_RE.match(s):
                raise MeshError(f"unknown boundary side {s!r}")
        return cls(tuple(sides))

    def __str__(self) -> str:
        return ", ".join(self.sides)

    def predicate(self, bounds: Bounds) -> Callable[[np.ndarray], np.ndarray]:
        x0, x1, y0, y1 = bounds
        tol = 1e-9 * max(x1 - x0, y1 - y0, 1.0)
        lines = []
        for s in self.sides:
            key = s.lower()
            if key == "all":
                return lambda mid: np.ones(len(mid), dtype=bool)
            if key in _NAMED_SIDES:
                axis, value = {"bottom": (1, y0), "top": (1, y1), "left": (0, x0), "right": (0, x1)}[key]
            else:
                m = _SIDE_RE.match(s)
                axis, value = (0 if m.group(1) == "x" else 1), float(m.group(2))
            lines.append((axis, value))

        def select(mid: np.ndarray) -> np.ndarray:
            hit = np.zeros(len(mid), dtype=bool)
            for axis, value in lines:
                hit |= np.abs(mid[:, axis] - value) <= tol
            return hit

        return select


def tag_boundary(mesh: Mesh, spec: Union[BoundarySpec, str, Sequence[str]]) -> Mesh:
    """Return a copy of `mesh` whose gamma flags are exactly the edges selected by `spec`."""
    spec = BoundarySpec.parse(spec)
    be = mesh.boundary_edges
    mid = 0.5 * (mesh.nodes[be[:, 0]] + mesh.nodes[be[:, 1]])
    gamma = spec.predicate(mesh.bounds)(mid)
    if not gamma.any():
        raise MeshError(f"boundary specification {str(spec)!r} selects no edge")
    return Mesh(nodes=mesh.nodes, triangles=mesh.triangles, boundary_edges=be,
                gamma=gamma, h=mesh.h, bounds=mesh.bounds)


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------
def closest_node(mesh: Mesh, point: Sequence[float]) -> int:
    """Index of the node nearest to `point`; ties go to the lowest index."""
    d2 = np.sum((mesh.nodes - np.asarray(point, dtype=float)) ** 2, axis=1)
    return int(np.argmin(d2))  # argmin returns the first minimizer


def nested_node_map(fine: Mesh, coarse: Mesh) -> np.ndarray:
    """
    For every coarse node, the index of the coincident fine node.
    `refine` keeps parent indices, so the map is normally the identity prefix.
    """
    nc = coarse.n_nodes
    if fine.n_nodes >= nc and np.array_equal(fine.nodes[:nc], coarse.nodes):
        return np.arange(nc)
    dist, idx = cKDTree(fine.nodes).query(coarse.nodes)
    if np.any(dist > 1e-9 * max(coarse.h, 1.0)):
        raise MeshError("coarse mesh nodes are not a subset of the fine mesh nodes")
    return idx


# ---------------------------------------------------------------------------
# text import / export
# ---------------------------------------------------------------------------
def dumps_mesh(mesh: Mesh) -> str:
    """Header "N T E", then N lines "x y", T lines "i j k", E lines "i j tag"."""
    lines = [f"{mesh.n_nodes} {mesh.n_triangles} {len(mesh.boundary_edges)}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines += [f"{i} {j} {int(g)}" for (i, j), g in zip(mesh.boundary_edges.tolist(), mesh.gamma.tolist())]
    return "\n".join(lines) + "\n"


def loads_mesh(text: str) -> Mesh:
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    try:
        n, t, e = (int(v) for v in rows[0])
        nodes = np.array(rows[1:1 + n], dtype=float)
        tris = np.array(rows[1 + n:1 + n + t], dtype=np.int64)
        edges = np.array(rows[1 + n + t:1 + n + t + e], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh text: {exc}") from exc
    if len(nodes) != n or len(tris) != t or len(edges) != e:
        raise MeshError("mesh text is truncated")
    x0, y0 = nodes.min(axis=0)
    x1, y1 = nodes.max(axis=0)
    mesh = Mesh(nodes=nodes, triangles=tris, boundary_edges=edges[:, :2],
                gamma=edges[:, 2].astype(bool), h=0.0, bounds=(x0, x1, y0, y1))
    _, hmax = mesh.edge_length_range()
    mesh = Mesh(nodes=nodes, triangles=tris, boundary_edges=edges[:, :2],
                gamma=edges[:, 2].astype(bool), h=hmax, bounds=(x0, x1, y0, y1))
    return mesh.validate()


def save_mesh(mesh: Mesh, path: Union[str, Path]) -> Path:
    p = Path(path)
    p.write_text(dumps_mesh(mesh), encoding="utf-8")
    return p


def load_mesh(path: Union[str, Path]) -> Mesh:
    return loads_mesh(Path(path).read_text(encoding="utf-8"))
