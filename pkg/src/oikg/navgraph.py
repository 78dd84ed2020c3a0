"""Directed navigation graphs and frontier-based exploration state.

A graph is a set of nodes with 3-D positions plus directed edges; edge
length is the Euclidean distance between endpoints, so all weights are
strictly positive.  Shortest paths break length ties by lexicographically
smallest node-id sequence, which makes every routing query reproducible.

Environment files store undirected connections; the loader materialises
each connection as two directed edges.
"""

import heapq
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import IllegalAction, InvalidArgument, SchemaError
from .geometry import RelativePose, relative_pose

STOP = -1  # action sentinel: terminate at the current node

INF = float("inf")


@dataclass(frozen=True)
class NavNode:
    id: int
    pos: tuple[float, float, float]
    room: int
    objects: tuple[int, ...]


class NavGraph:
    """Immutable node/edge container with cached route queries."""

    def __init__(self, nodes: dict[int, NavNode],
                 adjacency: dict[int, tuple[int, ...]],
                 poses: dict[tuple[int, int], RelativePose]):
        self.nodes = nodes
        self.adjacency = adjacency
        self.poses = poses
        self._dist_cache: dict[int, dict[int, float]] = {}

    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def neighbors(self, node_id: int) -> tuple[int, ...]:
        if node_id not in self.nodes:
            raise InvalidArgument(f"unknown node {node_id}")
        return self.adjacency[node_id]

    def has_edge(self, u: int, v: int) -> bool:
        return (u, v) in self.poses

    def edge_pose(self, u: int, v: int) -> RelativePose:
        try:
            return self.poses[(u, v)]
        except KeyError:
            raise InvalidArgument(f"no edge {u}->{v}") from None

    def position(self, node_id: int) -> np.ndarray:
        return np.array(self.nodes[node_id].pos)

    def edge_count(self) -> int:
        return len(self.poses)

    # ------------------------------------------------------------- routing

    def _dist_from(self, src: int) -> dict[int, float]:
        """Dijkstra distance map from src, cached (nodes/edges never change)."""
        cached = self._dist_cache.get(src)
        if cached is not None:
            return cached
        if src not in self.nodes:
            raise InvalidArgument(f"unknown node {src}")
        dist = {n: INF for n in self.nodes}
        dist[src] = 0.0
        heap = [(0.0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for v in self.adjacency[u]:
                nd = d + self.poses[(u, v)].length
                if nd < dist[v]:
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        self._dist_cache[src] = dist
        return dist

    def geodesic(self, src: int, dst: int) -> float:
        """Shortest-route length from src to dst; +inf when unreachable."""
        if dst not in self.nodes:
            raise InvalidArgument(f"unknown node {dst}")
        return self._dist_from(src)[dst]

    def shortest_path(self, src: int, dst: int,
                      allowed: set[int] | None = None) -> list[int] | None:
        """Minimum-length node sequence from src to dst, or None if unreachable.

        Among equal-length routes the lexicographically smallest id sequence
        wins (well defined because edge lengths are strictly positive, so
        optimal routes never revisit a node).  ``allowed`` optionally
        restricts intermediate and destination nodes to a subset.
        """
        if src not in self.nodes or dst not in self.nodes:
            raise InvalidArgument(f"unknown endpoint in {src}->{dst}")
        if allowed is not None and (src not in allowed or dst not in allowed):
            return None
        if src == dst:
            return [src]
        settled: set[int] = set()
        heap: list[tuple[float, tuple[int, ...]]] = [(0.0, (src,))]
        while heap:
            d, path = heapq.heappop(heap)
            u = path[-1]
            if u == dst:
                return list(path)
            if u in settled:
                continue
            settled.add(u)
            for v in self.adjacency[u]:
                if v in settled or (allowed is not None and v not in allowed):
                    continue
                heapq.heappush(heap, (d + self.poses[(u, v)].length, path + (v,)))
        return None


def build_graph(nodes: Iterable[NavNode], edges: Iterable[tuple[int, int]]) -> NavGraph:
    """Assemble and validate a directed graph.

    Rejects duplicate node ids, self loops, duplicate edges, edges touching
    unknown nodes, and non-finite positions.  Connected nodes may not share
    a position (the edge would have no direction).
    """
    node_map: dict[int, NavNode] = {}
    for n in nodes:
        if n.id in node_map:
            raise InvalidArgument(f"duplicate node id {n.id}")
        if len(n.pos) != 3 or not all(math.isfinite(c) for c in n.pos):
            raise InvalidArgument(f"node {n.id}: position must be 3 finite coordinates")
        node_map[n.id] = n

    adjacency: dict[int, list[int]] = {i: [] for i in node_map}
    poses: dict[tuple[int, int], RelativePose] = {}
    for u, v in edges:
        u, v = int(u), int(v)
        if u not in node_map or v not in node_map:
            raise InvalidArgument(f"edge ({u},{v}) references unknown node")
        if u == v:
            raise InvalidArgument(f"self loop at node {u}")
        if (u, v) in poses:
            raise InvalidArgument(f"duplicate edge ({u},{v})")
        poses[(u, v)] = relative_pose(node_map[u].pos, node_map[v].pos)
        adjacency[u].append(v)

    return NavGraph(node_map,
                    {i: tuple(sorted(nbrs)) for i, nbrs in adjacency.items()},
                    poses)


def path_length(graph: NavGraph, path: Sequence[int]) -> float:
    """Total Euclidean length of an edge-consecutive node sequence."""
    if not path:
        raise InvalidArgument("empty path")
    total = 0.0
    for u, v in zip(path, path[1:]):
        total += graph.edge_pose(u, v).length
    return total


class PathGraph:
    """Exploration state for one episode: visited set, route, and frontier.

    ``visited`` lists distinct decision nodes in first-visit order; ``route``
    is the full executed trajectory including pass-through nodes used to
    reach a non-adjacent frontier choice.  The frontier is every unvisited
    node adjacent to the visited set (global mode) or to the current node
    only (``local_only``).
    """

    def __init__(self, graph: NavGraph, start: int, local_only: bool = False):
        if start not in graph.nodes:
            raise InvalidArgument(f"unknown start node {start}")
        self.graph = graph
        self.local_only = local_only
        self.current = start
        self.visited: list[int] = [start]
        self._visited_set: set[int] = {start}
        self.route: list[int] = [start]
        self.terminal = False
        self.step = 0
        self._global_frontier: set[int] = set(graph.neighbors(start)) - self._visited_set

    def frontier(self) -> list[int]:
        """Candidate movement targets, sorted by node id."""
        if self.terminal:
            return []
        if self.local_only:
            pool = set(self.graph.neighbors(self.current)) - self._visited_set
        else:
            pool = self._global_frontier
        return sorted(pool)

    def actions(self) -> list[int]:
        """Frontier targets plus the always-legal STOP sentinel (last)."""
        return self.frontier() + [STOP]

    def advance(self, chosen: int) -> list[int]:
        """Move to a frontier node; returns the traversed segment (current excluded).

        A choice that is not adjacent to the current node is reached through
        the shortest route inside the explored region (visited plus the
        chosen node).
        """
        if self.terminal:
            raise IllegalAction("episode already terminated")
        if chosen == STOP:
            self.terminal = True
            return []
        if chosen not in self.frontier():
            raise IllegalAction(f"node {chosen} is not on the frontier")
        if self.graph.has_edge(self.current, chosen):
            segment = [chosen]
        else:
            route = self.graph.shortest_path(self.current, chosen,
                                             allowed=self._visited_set | {chosen})
            if route is None:
                raise IllegalAction(f"no route through explored region to {chosen}")
            segment = route[1:]
        self.route.extend(segment)
        self.current = chosen
        self.step += 1
        if chosen not in self._visited_set:
            self.visited.append(chosen)
            self._visited_set.add(chosen)
        self._global_frontier.discard(chosen)
        self._global_frontier |= set(self.graph.neighbors(chosen)) - self._visited_set
        return segment


# ------------------------------------------------------------- file formats


def _canonical_dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def graph_to_dict(graph: NavGraph) -> dict:
    """Environment dict with undirected connection pairs.

    Every directed edge must have its reverse; each pair is emitted once as
    [low, high].
    """
    pairs = set()
    for (u, v) in graph.poses:
        if not graph.has_edge(v, u):
            raise InvalidArgument(f"edge {u}->{v} has no reverse; cannot store as connections")
        pairs.add((min(u, v), max(u, v)))
    return {
        "nodes": [
            {"id": n.id, "pos": [float(c) for c in n.pos],
             "room": n.room, "objects": list(n.objects)}
            for n in (graph.nodes[i] for i in graph.node_ids())
        ],
        "edges": [list(p) for p in sorted(pairs)],
    }


def save_environment(path, graph: NavGraph) -> None:
    _canonical_dump(graph_to_dict(graph), path)


def graph_from_dict(data: dict) -> NavGraph:
    if not isinstance(data, dict) or "nodes" not in data or "edges" not in data:
        raise SchemaError("environment must be an object with 'nodes' and 'edges'")
    nodes = []
    for i, entry in enumerate(data["nodes"]):
        try:
            nodes.append(NavNode(id=int(entry["id"]),
                                 pos=tuple(float(c) for c in entry["pos"]),
                                 room=int(entry["room"]),
                                 objects=tuple(int(o) for o in entry["objects"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad node entry at index {i}: {exc}") from exc
    edges: list[tuple[int, int]] = []
    seen = set()
    for i, pair in enumerate(data["edges"]):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise SchemaError(f"bad edge entry at index {i}: expected [from, to]")
        u, v = int(pair[0]), int(pair[1])
        key = (min(u, v), max(u, v))
        if key in seen:
            raise SchemaError(f"duplicate connection {list(key)}")
        seen.add(key)
        edges.append((u, v))
        edges.append((v, u))
    try:
        return build_graph(nodes, edges)
    except InvalidArgument as exc:
        raise SchemaError(str(exc)) from exc


def load_environment(path) -> NavGraph:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    return graph_from_dict(data)
