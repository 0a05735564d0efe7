"""Road graph, random-waypoint mobility, unit-disc radio and the delivery truck."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .constants import transmission_delay


class Unreachable(Exception):
    pass


class BufferOverflow(Exception):
    pass


# -- road graph ------------------------------------------------------------------


@dataclass
class RoadGraph:
    vertices: np.ndarray  # (n, 2) metres
    adjacency: list[list[tuple[int, float]]]

    @classmethod
    def from_edges(cls, vertices: Sequence[tuple[float, float]], edges: Iterable[tuple[int, int]]) -> "RoadGraph":
        verts = np.asarray(vertices, dtype=float)
        adj: list[list[tuple[int, float]]] = [[] for _ in range(len(verts))]
        for a, b in edges:
            length = float(np.hypot(*(verts[a] - verts[b])))
            adj[a].append((b, length))
            adj[b].append((a, length))
        for nbrs in adj:
            nbrs.sort()
        return cls(verts, adj)

    @classmethod
    def grid(cls, n: int = 7, area_m: float = 3000.0) -> "RoadGraph":
        step = area_m / (n - 1)
        verts = [(c * step, r * step) for r in range(n) for c in range(n)]
        edges = []
        for r in range(n):
            for c in range(n):
                v = r * n + c
                if c + 1 < n:
                    edges.append((v, v + 1))
                if r + 1 < n:
                    edges.append((v, v + n))
        return cls.from_edges(verts, edges)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return [(a, b, w) for a, nbrs in enumerate(self.adjacency) for b, w in nbrs if a < b]

    def is_connected(self) -> bool:
        seen = {0}
        stack = [0]
        while stack:
            for u, _ in self.adjacency[stack.pop()]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        return len(seen) == len(self)

    def within(self, area_m: float) -> bool:
        return bool(np.all(self.vertices >= 0) and np.all(self.vertices <= area_m))

    def nearest_vertex(self, xy: Sequence[float]) -> int:
        return int(np.argmin(np.hypot(*(self.vertices - np.asarray(xy)).T)))

    def on_graph(self, xy: Sequence[float], tol: float = 1e-6) -> bool:
        p = np.asarray(xy, dtype=float)
        for a, b, _ in self.edges:
            va, vb = self.vertices[a], self.vertices[b]
            seg = vb - va
            t = np.clip(np.dot(p - va, seg) / np.dot(seg, seg), 0.0, 1.0)
            if np.hypot(*(va + t * seg - p)) <= tol:
                return True
        return False


def load_road_graph(path: str | Path) -> RoadGraph:
    """Plain text: ``v <id> <x> <y>`` and ``e <a> <b>`` lines, ``#`` comments."""
    verts: dict[int, tuple[float, float]] = {}
    edges = []
    for line in Path(path).read_text().splitlines():
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "v":
            verts[int(parts[1])] = (float(parts[2]), float(parts[3]))
        elif parts[0] == "e":
            edges.append((int(parts[1]), int(parts[2])))
        else:
            raise ValueError(f"bad road graph line: {line!r}")
    if sorted(verts) != list(range(len(verts))):
        raise ValueError("vertex ids must be 0..n-1")
    return RoadGraph.from_edges([verts[i] for i in range(len(verts))], edges)


def save_road_graph(graph: RoadGraph, path: str | Path) -> None:
    lines = [f"v {i} {x:.3f} {y:.3f}" for i, (x, y) in enumerate(graph.vertices)]
    lines += [f"e {a} {b}" for a, b, _ in graph.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def plan_route(graph: RoadGraph, src: int, dst: int) -> list[int]:
    """Dijkstra shortest path; equal-length paths resolve to the lexicographically smallest vertex sequence."""
    n = len(graph)
    if not (0 <= src < n and 0 <= dst < n):
        raise Unreachable(f"vertex out of range: {src}, {dst}")
    best: dict[int, tuple[float, tuple[int, ...]]] = {src: (0.0, (src,))}
    heap = [(0.0, (src,))]
    done = set()
    while heap:
        dist, path = heapq.heappop(heap)
        v = path[-1]
        if v in done:
            continue
        done.add(v)
        if v == dst:
            return list(path)
        for u, w in graph.adjacency[v]:
            if u in done:
                continue
            cand = (round(dist + w, 9), path + (u,))
            if u not in best or cand < best[u]:
                best[u] = cand
                heapq.heappush(heap, cand)
    raise Unreachable(f"no path from {src} to {dst}")


# -- random waypoint ---------------------------------------------------------------


@dataclass(frozen=True)
class MobilityModel:
    graph: RoadGraph
    speed_min: float = 1.0
    speed_max: float = 1.4
    pause_s: float = 10.0
    market_vertices: tuple[int, ...] = ()
    market_bias: float = 0.0

    def choose_waypoint(self, rng: np.random.Generator) -> int:
        # Always two draws so the stream advances identically for every choice.
        u = rng.random()
        if self.market_vertices and u < self.market_bias:
            return self.market_vertices[int(rng.integers(len(self.market_vertices)))]
        return int(rng.integers(len(self.graph)))

    def draw_trip(self, at_vertex: int, rng: np.random.Generator) -> tuple[int, float, list[int]]:
        waypoint = self.choose_waypoint(rng)
        speed = float(rng.uniform(self.speed_min, self.speed_max))
        return waypoint, speed, plan_route(self.graph, at_vertex, waypoint)


@dataclass(frozen=True)
class MobilityState:
    position: tuple[float, float]
    vertex: int  # last vertex reached
    waypoint: int
    path: tuple[int, ...]  # vertices still to visit, next first
    speed: float
    pause_remaining: float


def initial_state(model: MobilityModel, vertex: int) -> MobilityState:
    x, y = model.graph.vertices[vertex]
    return MobilityState((float(x), float(y)), vertex, vertex, (), 0.0, 0.0)


def step_mobility(state: MobilityState, dt: float, rng: np.random.Generator, model: MobilityModel) -> MobilityState:
    """Advance ``dt`` seconds: walk the path, pause on arrival, then pick a new trip."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    verts = model.graph.vertices
    pos = np.asarray(state.position, dtype=float)
    vertex, waypoint, path = state.vertex, state.waypoint, list(state.path)
    speed, pause = state.speed, state.pause_remaining
    remaining = dt
    while remaining > 1e-12:
        if pause > 0:
            used = min(pause, remaining)
            pause -= used
            remaining -= used
            continue
        if not path:
            waypoint, speed, route = model.draw_trip(vertex, rng)
            path = route[1:]
            if not path:
                pause = model.pause_s
            continue
        target = verts[path[0]]
        gap = float(np.hypot(*(target - pos)))
        reach = speed * remaining
        if reach >= gap:
            remaining -= gap / speed
            pos = target.astype(float).copy()
            vertex = path.pop(0)
            if not path:
                pause = model.pause_s
        else:
            pos = pos + (target - pos) * (reach / gap)
            remaining = 0.0
    return MobilityState((float(pos[0]), float(pos[1])), vertex, waypoint, tuple(path), speed, pause)


class Fleet:
    """Piecewise-linear trajectories for many nodes, evaluated with numpy.

    Queries must come in nondecreasing time.  Each node consumes its own
    generator exactly like :func:`step_mobility` does, so the two agree.
    """

    def __init__(
        self,
        model: MobilityModel,
        start_vertices: Sequence[int],
        rngs: Sequence[np.random.Generator],
        static: Iterable[int] = (),
    ):
        self.model = model
        n = len(start_vertices)
        self.rngs = list(rngs)
        self.follow: dict[int, tuple[int, np.ndarray]] = {}
        self.vertex = list(start_vertices)
        self.t0 = np.zeros(n)
        self.t1 = np.zeros(n)
        self.p0 = model.graph.vertices[list(start_vertices)].astype(float)
        self.p1 = self.p0.copy()
        self.path: list[list[int]] = [[] for _ in range(n)]
        self.speed = np.zeros(n)
        self.pause_next = [False] * n
        for i in static:
            self.t1[i] = math.inf
        self.now = 0.0

    def __len__(self) -> int:
        return len(self.vertex)

    def add_follower(self, node: int, leader: int, offset: tuple[float, float] = (0.0, 0.0)) -> None:
        self.follow[node] = (leader, np.asarray(offset, dtype=float))

    def _next_leg(self, i: int) -> None:
        start = self.t1[i]
        self.p0[i] = self.p1[i]
        self.t0[i] = start
        while True:
            if self.path[i]:
                nxt = self.path[i].pop(0)
                target = self.model.graph.vertices[nxt]
                self.p1[i] = target
                self.t1[i] = start + float(np.hypot(*(target - self.p0[i]))) / self.speed[i]
                self.vertex[i] = nxt
                self.pause_next[i] = not self.path[i]
                return
            if self.pause_next[i]:
                self.pause_next[i] = False
                self.t1[i] = start + self.model.pause_s
                return
            _, speed, route = self.model.draw_trip(self.vertex[i], self.rngs[i])
            self.speed[i] = speed
            self.path[i] = route[1:]
            self.pause_next[i] = not self.path[i]

    def positions(self, t: float) -> np.ndarray:
        if t < self.now - 1e-9:
            raise ValueError("fleet queries must be nondecreasing in time")
        self.now = t
        for i in np.nonzero(self.t1 < t)[0]:
            while self.t1[i] < t:
                self._next_leg(int(i))
        span = self.t1 - self.t0
        safe = np.where(span > 0, span, 1.0)
        frac = np.where(span > 0, np.clip((t - self.t0) / safe, 0.0, 1.0), 1.0)
        pos = self.p0 + (self.p1 - self.p0) * frac[:, None]
        for i, (leader, offset) in self.follow.items():
            pos[i] = pos[leader] + offset
        return pos


# -- radio -------------------------------------------------------------------------


@dataclass(frozen=True)
class RadioModel:
    range_m: float = 100.0
    bandwidth_bps: float = 1e6

    def hop_delay(self, size_bytes: int) -> float:
        return transmission_delay(size_bytes, self.bandwidth_bps)

    def adjacency(self, pos: np.ndarray, online: np.ndarray) -> np.ndarray:
        dx = pos[:, None, 0] - pos[None, :, 0]
        dy = pos[:, None, 1] - pos[None, :, 1]
        adj = (dx * dx + dy * dy <= self.range_m**2) & online[:, None] & online[None, :]
        np.fill_diagonal(adj, False)
        return adj


def hop_path(adj: np.ndarray, src: int, dst: int, max_hops: int) -> list[int] | None:
    """Fewest-hop path (lowest-id predecessor on ties) or None beyond ``max_hops``."""
    if src == dst:
        return [src]
    n = adj.shape[0]
    parent = np.full(n, -1)
    seen = np.zeros(n, dtype=bool)
    seen[src] = True
    frontier = np.array([src])
    for _ in range(max_hops):
        reach = adj[frontier]  # (f, n)
        new = reach.any(axis=0) & ~seen
        if not new.any():
            return None
        idx = np.nonzero(new)[0]
        # first frontier node (frontier is sorted) that reaches each new node
        parent[idx] = frontier[np.argmax(reach[:, idx], axis=0)]
        seen |= new
        if new[dst]:
            path = [dst]
            while path[-1] != src:
                path.append(int(parent[path[-1]]))
            return path[::-1]
        frontier = idx
    return None


def hop_counts(adj: np.ndarray, src: int, max_hops: int) -> np.ndarray:
    """Hop distance from ``src`` to every node; -1 beyond ``max_hops``."""
    dist = np.full(adj.shape[0], -1)
    dist[src] = 0
    frontier = np.array([src])
    for h in range(1, max_hops + 1):
        new = adj[frontier].any(axis=0) & (dist < 0)
        if not new.any():
            break
        dist[new] = h
        frontier = np.nonzero(new)[0]
    return dist


@dataclass
class Buffer:
    """Store-carry-forward buffer with oldest-first eviction."""

    capacity_bytes: int
    items: list = field(default_factory=list)  # (size, payload)
    dropped: int = 0

    @property
    def used(self) -> int:
        return sum(s for s, _ in self.items)

    def push(self, size: int, payload) -> list:
        """Store ``payload``; return whatever was evicted to make room."""
        evicted = []
        if size > self.capacity_bytes:
            self.dropped += 1
            return [payload]
        self.items.append((size, payload))
        while self.used > self.capacity_bytes:
            evicted.append(self.items.pop(0)[1])
            self.dropped += 1
        return evicted

    def pop_all(self) -> list:
        out = [p for _, p in self.items]
        self.items.clear()
        return out


# -- truck ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TruckState:
    """Delivery truck touring ``regions`` once per ``period`` seconds."""

    regions: int = 4
    period: float = 172800.0

    def arrival_times(self, region: int, until: float) -> list[float]:
        first = (region + 0.5) * self.period / self.regions
        times = []
        t = first
        while t <= until:
            times.append(t)
            t += self.period
        return times

    def return_times(self, until: float) -> list[float]:
        return [k * self.period for k in range(1, int(until // self.period) + 1)]


def region_of(xy: Sequence[float], area_m: float, regions: int) -> int:
    """Regions are vertical strips of equal width."""
    return min(regions - 1, int(xy[0] / area_m * regions))


# -- event queue ---------------------------------------------------------------------


class EventQueue:
    """Time-ordered events; ties resolve in insertion order."""

    def __init__(self):
        self._heap: list = []
        self._seq = 0

    def push(self, t: float, kind: str, *payload) -> None:
        heapq.heappush(self._heap, (t, self._seq, kind, payload))
        self._seq += 1

    def pop(self):
        t, _, kind, payload = heapq.heappop(self._heap)
        return t, kind, payload

    def __len__(self) -> int:
        return len(self._heap)

    def peek_time(self) -> float:
        return self._heap[0][0]
