"""Crossing-point graph over traversable planes and route queries on it.

Each pair of neighboring planes gets one vertex on their shared crossing
segment: the midpoint when clearance allows, otherwise the feasible point
closest to it. Edges are shortest in-plane grid routes between vertices,
simplified into taut polylines by line-of-sight shortcutting. A query
attaches virtual start and goal nodes to every vertex of their planes and
runs a uniform-cost search over the combined graph.

Grid routes are found with Dijkstra over the 8-connected traversable
cells; route costs are recomputed from the integer counts of straight and
diagonal steps, so equal-length routes always produce bit-identical costs
regardless of visit order.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csgraph, csr_matrix

from .errors import NoPlaneNearGoal, NoPlaneNearStart, Unreachable
from .extraction import TraversablePlane, thread_count
from .mapping import TRAVERSABLE_STATES, GridMap, query_esdf

SQRT2 = math.sqrt(2.0)

# dx, dy, step weight in cell units
_MOVES = (
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, SQRT2),
    (1, -1, SQRT2),
    (-1, 1, SQRT2),
    (-1, -1, SQRT2),
)


@dataclass
class GraphConfig:
    safety_distance: float = 0.2
    projection_max_dist: float = 1.5


@dataclass(frozen=True)
class GraphVertex:
    """A feasible crossing point between two neighboring planes."""

    id: int
    plane_pair: tuple[int, int]
    world_point: np.ndarray
    local_points: dict[int, np.ndarray]  # plane index -> 2D point in that plane
    line_param: float  # position along the crossing segment, in (0, 1)


@dataclass(frozen=True)
class GraphEdge:
    endpoints: tuple[int, int]  # vertex ids, smaller first
    plane: int
    polyline: np.ndarray  # (N, 2) points in the plane's coordinates
    cost: float


@dataclass
class PlaneGraph:
    vertices: list[GraphVertex]
    edges: list[GraphEdge]
    adjacency: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    def vertices_on(self, plane: int) -> list[GraphVertex]:
        return [v for v in self.vertices if plane in v.plane_pair]


@dataclass
class PathResult:
    """A start-to-goal route as per-plane polylines chained at crossings."""

    start: np.ndarray
    goal: np.ndarray
    planes: list[int]
    polylines: list[np.ndarray]  # one (N, 2) polyline per entry of planes
    crossings: list[GraphVertex]  # len(planes) - 1, in traversal order
    cost: float


def _nav(grid: GridMap, margin: float):
    """Traversable-cell mask and sparse step graph, cached per grid."""
    cache = grid.__dict__.setdefault("_nav_cache", {})
    entry = cache.get(margin)
    if entry is not None:
        return entry
    trav = np.isin(grid.states, np.asarray(TRAVERSABLE_STATES, dtype=np.uint8))
    if grid.esdf is not None:
        trav &= grid.esdf >= margin
    height, width = trav.shape
    ys, xs = np.nonzero(trav)
    base = ys * width + xs
    rows, cols, weights = [], [], []
    for dx, dy, w in _MOVES:
        xn, yn = xs + dx, ys + dy
        sel = ((xn >= 0) & (xn < width) & (yn >= 0) & (yn < height)).nonzero()[0]
        sel = sel[trav[yn[sel], xn[sel]]]
        rows.append(base[sel])
        cols.append(yn[sel] * width + xn[sel])
        weights.append(np.full(len(sel), w))
    matrix = csr_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
        shape=(height * width, height * width),
    )
    entry = (trav, matrix)
    cache[margin] = entry
    return entry


def grid_route(
    grid: GridMap, start: tuple[int, int], goal: tuple[int, int], margin: float
) -> tuple[list[tuple[int, int]], int, int] | None:
    """Shortest 8-connected cell route, or None if disconnected.

    Returns the cell sequence plus the straight and diagonal step counts;
    the cost follows from the counts alone (see route_cost).
    """
    if not grid.is_traversable_cell(*start, margin):
        return None
    if not grid.is_traversable_cell(*goal, margin):
        return None
    if start == goal:
        return [start], 0, 0
    _, matrix = _nav(grid, margin)
    width = grid.width
    src = start[1] * width + start[0]
    dst = goal[1] * width + goal[0]
    dist, pred = csgraph.dijkstra(
        matrix, directed=True, indices=src, return_predecessors=True
    )
    if not np.isfinite(dist[dst]):
        return None
    cells = [goal]
    cur = dst
    while cur != src:
        cur = int(pred[cur])
        cells.append((cur % width, cur // width))
    cells.reverse()
    straight = diag = 0
    for (x0, y0), (x1, y1) in zip(cells, cells[1:]):
        if x1 != x0 and y1 != y0:
            diag += 1
        else:
            straight += 1
    return cells, straight, diag


def route_cost(straight: int, diag: int, resolution: float) -> float:
    return (straight + diag * SQRT2) * resolution


def _segment_clear(grid: GridMap, trav: np.ndarray, a: np.ndarray, b: np.ndarray) -> bool:
    """Sample a segment at sub-cell spacing; every sample must land on a
    traversable cell."""
    res = grid.resolution
    n = int(np.linalg.norm(b - a) / (res / 3.0)) + 2
    ts = np.linspace(0.0, 1.0, n)
    pts = a + ts[:, None] * (b - a)
    ix = np.floor((pts[:, 0] - grid.origin[0]) / res + 0.5).astype(int)
    iy = np.floor((pts[:, 1] - grid.origin[1]) / res + 0.5).astype(int)
    if ((ix < 0) | (ix >= grid.width) | (iy < 0) | (iy >= grid.height)).any():
        return False
    return bool(trav[iy, ix].all())


def _shortcut(grid: GridMap, polyline: np.ndarray, margin: float) -> np.ndarray:
    """Greedy line-of-sight simplification; adjacent points always connect."""
    trav, _ = _nav(grid, margin)
    out = [polyline[0]]
    i = 0
    last = len(polyline) - 1
    while i < last:
        j = last
        while j > i + 1 and not _segment_clear(grid, trav, polyline[i], polyline[j]):
            j -= 1
        out.append(polyline[j])
        i = j
    merged = np.asarray(out)
    keep = np.ones(len(merged), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(merged, axis=0), axis=1) > 1e-12
    return merged[keep]


def in_plane_path(
    plane: TraversablePlane, a, b, safety_distance: float = 0.2
) -> tuple[np.ndarray, float] | None:
    """Shortcut polyline from a to b within one plane's grid, with its
    arc-length cost; None when no traversable route exists."""
    grid = plane.grid
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    route = grid_route(grid, grid.cell_index(*a), grid.cell_index(*b), safety_distance)
    if route is None:
        return None
    cells, _, _ = route
    points = [a]
    points.extend(grid.cell_center(ix, iy) for ix, iy in cells)
    points.append(b)
    polyline = _shortcut(grid, np.asarray(points), safety_distance)
    cost = float(np.linalg.norm(np.diff(polyline, axis=0), axis=1).sum())
    return polyline, cost


def _vertex_feasible(plane: TraversablePlane, world: np.ndarray, margin: float) -> bool:
    local = plane.transform.to_local(world)
    grid = plane.grid
    if not grid.is_traversable_cell(*grid.cell_index(local[0], local[1]), margin):
        return False
    return query_esdf(grid, local[0], local[1]).value >= margin


def place_vertices(
    planes: list[TraversablePlane], config: GraphConfig | None = None
) -> list[GraphVertex]:
    """One vertex per neighboring plane pair, on the crossing segment.

    Starts at the midpoint; when that is infeasible in either plane, scans
    symmetric offsets of one grid cell at a time and takes the first
    feasible point. Pairs whose whole segment is infeasible get no vertex.
    """
    config = config or GraphConfig()
    vertices: list[GraphVertex] = []
    for i, plane in enumerate(planes):
        for j in sorted(plane.neighbors):
            if j <= i:
                continue
            other = planes[j]
            segment = plane.neighbors[j]
            direction = segment.b - segment.a
            length = float(np.linalg.norm(direction))
            if length < 1e-9:
                continue
            t_step = plane.grid.resolution / length
            param = None
            k = 0
            while param is None:
                offsets = (0.0,) if k == 0 else (k * t_step, -k * t_step)
                in_range = False
                for off in offsets:
                    t = 0.5 + off
                    if not 0.0 < t < 1.0:
                        continue
                    in_range = True
                    world = segment.a + t * direction
                    if _vertex_feasible(plane, world, config.safety_distance) and (
                        _vertex_feasible(other, world, config.safety_distance)
                    ):
                        param = t
                        break
                if not in_range:
                    break
                k += 1
            if param is None:
                continue
            world = segment.a + param * direction
            local = {
                i: plane.transform.to_local(world)[:2],
                j: other.transform.to_local(world)[:2],
            }
            vertices.append(
                GraphVertex(len(vertices), (i, j), world, local, float(param))
            )
    return vertices


def build_graph(
    planes: list[TraversablePlane], config: GraphConfig | None = None
) -> PlaneGraph:
    """Place crossing vertices and connect every in-plane reachable pair."""
    config = config or GraphConfig()
    vertices = place_vertices(planes, config)
    on_plane = {
        p: [v.id for v in vertices if p in v.plane_pair] for p in range(len(planes))
    }

    def plane_edges(p: int) -> list[GraphEdge]:
        out = []
        ids = on_plane[p]
        for s in range(len(ids)):
            for t in range(s + 1, len(ids)):
                u, v = ids[s], ids[t]
                found = in_plane_path(
                    planes[p],
                    vertices[u].local_points[p],
                    vertices[v].local_points[p],
                    config.safety_distance,
                )
                if found is not None:
                    out.append(GraphEdge((u, v), p, found[0], found[1]))
        return out

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            groups = list(pool.map(plane_edges, range(len(planes))))
    else:
        groups = [plane_edges(p) for p in range(len(planes))]
    graph = PlaneGraph(vertices, [e for group in groups for e in group])
    for idx, edge in enumerate(graph.edges):
        u, v = edge.endpoints
        graph.adjacency.setdefault(u, []).append((idx, v))
        graph.adjacency.setdefault(v, []).append((idx, u))
    return graph


def dijkstra_nodes(adjacency, source, target):
    """Uniform-cost search over adjacency lists of (neighbor, weight, token).

    Returns (cost, nodes, tokens) where tokens[k] is the token of the edge
    between nodes[k] and nodes[k+1]. Raises Unreachable when no route
    exists. Ties are broken by node id for determinism.
    """
    dist = {source: 0.0}
    prev = {}
    done = set()
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == target:
            break
        for item in adjacency.get(u, ()):
            v, w = item[0], item[1]
            nd = d + w
            if v not in dist or nd < dist[v]:
                dist[v] = nd
                prev[v] = (u, item)
                heapq.heappush(heap, (nd, v))
    if target not in done:
        raise Unreachable("no route between the requested nodes")
    nodes = [target]
    tokens = []
    while nodes[-1] != source:
        u, item = prev[nodes[-1]]
        tokens.append(item[2] if len(item) > 2 else None)
        nodes.append(u)
    nodes.reverse()
    tokens.reverse()
    return dist[target], nodes, tokens


def _project(planes, point, max_dist, error, which):
    point = np.asarray(point, dtype=float)
    best = None
    for idx, plane in enumerate(planes):
        local = plane.transform.to_local(point)
        if abs(local[2]) > max_dist:
            continue
        if not plane.expanded_boundary.contains(local[:2]):
            continue
        key = (abs(local[2]), idx)
        if best is None or key < best[0]:
            best = (key, idx, local[:2].copy())
    if best is None:
        raise error(f"no traversable plane within {max_dist} m of the {which}")
    return best[1], best[2]


def search_path(
    graph: PlaneGraph,
    planes: list[TraversablePlane],
    start,
    goal,
    config: GraphConfig | None = None,
) -> PathResult:
    """Least-cost route from start to goal through the crossing graph.

    Both endpoints are projected onto the nearest plane whose expanded
    boundary contains them; virtual nodes are linked by in-plane routes to
    every vertex of that plane (and directly to each other when both lie
    on the same plane), then a uniform-cost search runs over the combined
    graph. Consecutive hops on one plane merge into a single polyline.
    """
    config = config or GraphConfig()
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    ps, start_2d = _project(
        planes, start, config.projection_max_dist, NoPlaneNearStart, "start"
    )
    pg, goal_2d = _project(
        planes, goal, config.projection_max_dist, NoPlaneNearGoal, "goal"
    )

    n = len(graph.vertices)
    source, target = n, n + 1
    adjacency: dict[int, list] = {u: [] for u in range(n + 2)}
    for edge in graph.edges:
        u, v = edge.endpoints
        adjacency[u].append((v, edge.cost, (edge.plane, edge.polyline)))
        adjacency[v].append((u, edge.cost, (edge.plane, edge.polyline[::-1])))
    for vertex in graph.vertices:
        if ps in vertex.plane_pair:
            found = in_plane_path(
                planes[ps], start_2d, vertex.local_points[ps], config.safety_distance
            )
            if found is not None:
                adjacency[source].append((vertex.id, found[1], (ps, found[0])))
        if pg in vertex.plane_pair:
            found = in_plane_path(
                planes[pg], vertex.local_points[pg], goal_2d, config.safety_distance
            )
            if found is not None:
                adjacency[vertex.id].append((target, found[1], (pg, found[0])))
    if ps == pg:
        direct = in_plane_path(planes[ps], start_2d, goal_2d, config.safety_distance)
        if direct is not None:
            adjacency[source].append((target, direct[1], (ps, direct[0])))

    try:
        cost, nodes, tokens = dijkstra_nodes(adjacency, source, target)
    except Unreachable:
        raise Unreachable("no traversable route from start to goal") from None

    plane_seq: list[int] = []
    groups: list[list[np.ndarray]] = []
    crossings: list[GraphVertex] = []
    for k, (plane_idx, poly) in enumerate(tokens):
        if plane_seq and plane_idx == plane_seq[-1]:
            groups[-1].append(poly)
        else:
            if plane_seq:
                crossings.append(graph.vertices[nodes[k]])
            plane_seq.append(plane_idx)
            groups.append([poly])
    polylines = []
    for group in groups:
        merged = np.vstack(group)
        keep = np.ones(len(merged), dtype=bool)
        keep[1:] = np.linalg.norm(np.diff(merged, axis=0), axis=1) > 1e-12
        polylines.append(merged[keep])
    return PathResult(start, goal, plane_seq, polylines, crossings, cost)
