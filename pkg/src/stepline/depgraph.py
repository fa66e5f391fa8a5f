"""Producer/consumer dependency graph over task instances.

Edges are derived solely from declared files: (p, c) exists iff some
expanded target of p equals some expanded dep of c.  Manifest order is
used only for deterministic tie-breaking and display.
"""

from __future__ import annotations

import heapq
from collections import deque

from .errors import CycleDetectedError, DuplicateProducerError, UnknownInstanceError
from .manifest import PER_RECORDING, PipelineSpec, TaskInstance


class DependencyGraph:
    """Immutable after construction; safe to share across threads."""

    def __init__(
        self,
        nodes: tuple[str, ...],
        edges: frozenset,
        raw_inputs: frozenset,
        producer_of: dict,
        children: dict,
        parents: dict,
        sort_key: dict,
        task_of: dict,
    ):
        self.nodes = nodes
        self.edges = edges
        self.raw_inputs = raw_inputs
        self.producer_of = producer_of
        self._children = children
        self._parents = parents
        self._sort_key = sort_key
        self._task_of = task_of

    def children(self, instance_id: str) -> tuple[str, ...]:
        return self._children.get(instance_id, ())

    def parents(self, instance_id: str) -> tuple[str, ...]:
        return self._parents.get(instance_id, ())

    def sort_key(self, instance_id: str) -> tuple[int, int]:
        return self._sort_key[instance_id]

    def task_of(self, instance_id: str) -> str:
        return self._task_of[instance_id]


def build_graph(instances: list[TaskInstance]) -> DependencyGraph:
    """Build the file-level graph; rejects duplicate producers and cycles."""
    ids = [inst.instance_id for inst in instances]
    if len(set(ids)) != len(ids):
        raise ValueError("instance ids are not unique")
    sort_key = {inst.instance_id: inst.sort_key for inst in instances}

    producer_of: dict = {}
    for inst in instances:
        for target in inst.expanded_targets:
            other = producer_of.get(target)
            if other is not None and other != inst.instance_id:
                raise DuplicateProducerError(
                    f"target {target!r} is produced by both {other!r} and {inst.instance_id!r}"
                )
            producer_of[target] = inst.instance_id

    edges: set = set()
    raw_inputs: set = set()
    for inst in instances:
        for dep in inst.expanded_deps:
            producer = producer_of.get(dep)
            if producer is None:
                raw_inputs.add(dep)
            else:
                edges.add((producer, inst.instance_id))

    children: dict = {i: set() for i in ids}
    parents: dict = {i: set() for i in ids}
    for p, c in edges:
        children[p].add(c)
        parents[c].add(p)

    _ensure_acyclic(ids, children, parents, sort_key)

    order = sorted(ids, key=lambda i: (sort_key[i], i))
    by_key = lambda i: (sort_key[i], i)
    return DependencyGraph(
        nodes=tuple(order),
        edges=frozenset(edges),
        raw_inputs=frozenset(raw_inputs),
        producer_of=producer_of,
        children={i: tuple(sorted(children[i], key=by_key)) for i in ids},
        parents={i: tuple(sorted(parents[i], key=by_key)) for i in ids},
        sort_key=sort_key,
        task_of={inst.instance_id: inst.task.name for inst in instances},
    )


def _ensure_acyclic(ids, children, parents, sort_key) -> None:
    indegree = {i: len(parents[i]) for i in ids}
    queue = deque(i for i in ids if indegree[i] == 0)
    removed = 0
    while queue:
        node = queue.popleft()
        removed += 1
        for child in children[node]:
            indegree[child] -= 1
            if indegree[child] == 0:
                queue.append(child)
    if removed == len(ids):
        return
    remaining = {i for i in ids if indegree[i] > 0}
    raise CycleDetectedError(_find_cycle(remaining, children))


def _find_cycle(remaining: set, children: dict) -> list[str]:
    """Shortest cycle through the smallest cyclic node id; deterministic."""
    for start in sorted(remaining):
        # BFS from start back to start, restricted to the cyclic core
        prev: dict = {start: None}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for child in sorted(children[node]):
                if child not in remaining:
                    continue
                if child == start:
                    path = [node]
                    while prev[path[-1]] is not None:
                        path.append(prev[path[-1]])
                    path.reverse()
                    return path
                if child not in prev:
                    prev[child] = node
                    queue.append(child)
        remaining = remaining - {start}
    raise AssertionError("no cycle found in cyclic core")


def topo_order(graph: DependencyGraph) -> list[str]:
    """Producers before consumers; ties broken by manifest/recording order."""
    indegree = {i: len(graph.parents(i)) for i in graph.nodes}
    heap = [(graph.sort_key(i), i) for i in graph.nodes if indegree[i] == 0]
    heapq.heapify(heap)
    out: list[str] = []
    while heap:
        _, node = heapq.heappop(heap)
        out.append(node)
        for child in graph.children(node):
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(heap, (graph.sort_key(child), child))
    return out


def descendants(graph: DependencyGraph, seeds) -> set:
    """Every node reachable from the seeds, excluding the seeds themselves."""
    seeds = set(seeds)
    unknown = seeds - set(graph.nodes)
    if unknown:
        raise UnknownInstanceError(f"unknown instances: {', '.join(sorted(unknown))}")
    reached: set = set()
    queue = deque(seeds)
    while queue:
        for child in graph.children(queue.popleft()):
            if child not in reached:
                reached.add(child)
                queue.append(child)
    return reached - seeds


def export_graph(graph: DependencyGraph, spec: PipelineSpec, instances_level: bool = False) -> str:
    """Render the graph as deterministic Graphviz dot text.

    By default instances collapse to one node per task; per-recording
    tasks carry an instance-count annotation (the stacked-boxes view).
    ``instances_level`` emits the full instance graph instead.
    """
    lines = [f'digraph "{spec.name}" {{', "  rankdir=LR;", '  node [shape=box, fontname="sans-serif"];']
    if instances_level:
        for node in graph.nodes:
            lines.append(f'  "{node}" [label="{node}"];')
        for p, c in sorted(graph.edges, key=lambda e: (graph.sort_key(e[0]), graph.sort_key(e[1]))):
            lines.append(f'  "{p}" -> "{c}";')
    else:
        counts: dict = {}
        for node in graph.nodes:
            task = graph.task_of(node)
            counts[task] = counts.get(task, 0) + 1
        position = {task.name: task.order_index for task in spec.tasks}
        for task in spec.tasks:
            label = task.name
            if task.kind == PER_RECORDING:
                label = f"{task.name} ×{counts.get(task.name, 0)}"
            lines.append(f'  "{task.name}" [label="{label}"];')
        task_edges = {(graph.task_of(p), graph.task_of(c)) for p, c in graph.edges}
        for p, c in sorted(task_edges, key=lambda e: (position[e[0]], position[e[1]])):
            lines.append(f'  "{p}" -> "{c}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
