"""Inventory of physical and virtual components and their relationships.

Tracks nodes with configuration hashes, enforces the layering and acyclicity
rules on the relationship graph, infers virtual-to-physical hosting edges
from attributes, and emits config.change events when a component's
configuration drifts.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

import yaml

from .errors import ConfigError, CycleError, LayerError, UnknownComponent
from .events import ComponentId, ComponentKind, NormalizedEvent, Scalar, Severity, make_event


class Layer(str, Enum):
    PHYSICAL = "physical"
    VIRTUAL = "virtual"
    SERVICE = "service"


class EdgeKind(str, Enum):
    HOSTS = "hosts"
    CONNECTS = "connects"
    DEPENDS_ON = "depends_on"


#: Edge kinds that carry causal meaning (acyclic, used by RCA).
CAUSAL_KINDS = frozenset({EdgeKind.HOSTS, EdgeKind.DEPENDS_ON})

_KIND_LAYER = {
    ComponentKind.PHYSICAL_HOST: Layer.PHYSICAL,
    ComponentKind.NETWORK_SWITCH: Layer.PHYSICAL,
    ComponentKind.VM: Layer.VIRTUAL,
    ComponentKind.SERVICE: Layer.SERVICE,
    # externals sit at the service layer: they are leaf consumers/providers
    ComponentKind.EXTERNAL: Layer.SERVICE,
}

#: hosts edges may only go physical -> virtual or virtual -> service.
_HOSTS_ALLOWED = {(Layer.PHYSICAL, Layer.VIRTUAL), (Layer.VIRTUAL, Layer.SERVICE)}

_HOST_ATTR = "host_id"
_HOST_ATTR_RE = re.compile(r"host_id=([^\s|]+)")


def layer_for(kind: ComponentKind) -> Layer:
    return _KIND_LAYER[ComponentKind(kind)]


def canonical_config_hash(config: Mapping[str, Scalar]) -> str:
    """Representation-independent digest: sorted keys, numbers as floats."""
    canon: dict[str, Any] = {}
    for key, value in config.items():
        if isinstance(value, bool) or value is None or isinstance(value, str):
            canon[str(key)] = value
        elif isinstance(value, (int, float)):
            canon[str(key)] = float(value)
        else:
            canon[str(key)] = str(value)
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class InventoryNode:
    """One inventoried component with attributes and tracked config."""

    component: ComponentId
    layer: Layer | None = None
    attrs: dict[str, Scalar] = field(default_factory=dict)
    config: dict[str, Scalar] = field(default_factory=dict)
    config_hash: str = ""

    def __post_init__(self) -> None:
        expected = layer_for(self.component.kind)
        if self.layer is None:
            self.layer = expected
        else:
            self.layer = Layer(self.layer)
            if self.layer != expected:
                raise LayerError(
                    f"{self.component.id}: kind {self.component.kind.value} belongs to layer "
                    f"{expected.value}, not {self.layer.value}"
                )
        self.attrs = dict(self.attrs)
        self.config = dict(self.config)
        self.config_hash = canonical_config_hash(self.config)


@dataclass(frozen=True)
class RelationshipEdge:
    parent: ComponentId
    child: ComponentId
    kind: EdgeKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EdgeKind(self.kind))


@dataclass(frozen=True)
class MappingResult:
    """Outcome of hosting inference: new edges plus unmatched virtual nodes."""

    added: tuple[RelationshipEdge, ...]
    orphans: tuple[str, ...]


class Topology:
    """Mutable inventory graph; single writer, concurrent readers."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._nodes: dict[str, InventoryNode] = {}
        # adjacency per causal direction, all kinds kept separate
        self._children: dict[str, dict[EdgeKind, set[str]]] = {}
        self._parents: dict[str, dict[EdgeKind, set[str]]] = {}
        self._edges: set[RelationshipEdge] = set()

    # -- nodes -----------------------------------------------------------------

    def upsert_node(self, node: InventoryNode) -> None:
        with self._lock:
            self._nodes[node.component.id] = node
            self._children.setdefault(node.component.id, {})
            self._parents.setdefault(node.component.id, {})

    def node(self, component_id: str) -> InventoryNode:
        with self._lock:
            try:
                return self._nodes[component_id]
            except KeyError:
                raise UnknownComponent(component_id) from None

    def __contains__(self, component_id: str) -> bool:
        with self._lock:
            return component_id in self._nodes

    def nodes(self) -> list[InventoryNode]:
        with self._lock:
            return [self._nodes[k] for k in sorted(self._nodes)]

    def edges(self) -> list[RelationshipEdge]:
        with self._lock:
            return sorted(self._edges, key=lambda e: (e.parent.id, e.child.id, e.kind.value))

    # -- edges -----------------------------------------------------------------

    def _reachable(self, start: str, goal: str, kinds: frozenset[EdgeKind]) -> bool:
        seen = {start}
        frontier = deque([start])
        while frontier:
            cur = frontier.popleft()
            if cur == goal:
                return True
            for kind in kinds:
                for nxt in self._children.get(cur, {}).get(kind, ()):
                    if nxt not in seen:
                        seen.add(nxt)
                        frontier.append(nxt)
        return False

    def link(self, parent_id: str, child_id: str, kind: EdgeKind | str) -> RelationshipEdge:
        """Add an edge; rejects unknown endpoints, layer breaks and cycles.

        Linking an already-present triple is a no-op.
        """
        kind = EdgeKind(kind)
        with self._lock:
            if parent_id not in self._nodes:
                raise UnknownComponent(parent_id)
            if child_id not in self._nodes:
                raise UnknownComponent(child_id)
            parent = self._nodes[parent_id]
            child = self._nodes[child_id]
            edge = RelationshipEdge(parent.component, child.component, kind)
            if edge in self._edges:
                return edge
            if kind == EdgeKind.HOSTS and (parent.layer, child.layer) not in _HOSTS_ALLOWED:
                raise LayerError(
                    f"hosts edge must go physical->virtual or virtual->service, got "
                    f"{parent.layer.value}->{child.layer.value}"
                )
            if kind in CAUSAL_KINDS:
                if parent_id == child_id or self._reachable(child_id, parent_id, CAUSAL_KINDS):
                    raise CycleError(f"{parent_id} -> {child_id} would close a cycle")
            self._edges.add(edge)
            self._children[parent_id].setdefault(kind, set()).add(child_id)
            self._parents[child_id].setdefault(kind, set()).add(parent_id)
            return edge

    def unlink(self, parent_id: str, child_id: str, kind: EdgeKind | str) -> None:
        kind = EdgeKind(kind)
        with self._lock:
            if parent_id not in self._nodes:
                raise UnknownComponent(parent_id)
            if child_id not in self._nodes:
                raise UnknownComponent(child_id)
            edge = RelationshipEdge(self._nodes[parent_id].component, self._nodes[child_id].component, kind)
            self._edges.discard(edge)
            self._children.get(parent_id, {}).get(kind, set()).discard(child_id)
            self._parents.get(child_id, {}).get(kind, set()).discard(parent_id)

    # -- traversal ---------------------------------------------------------------

    def _walk(
        self,
        start: str,
        kinds: Iterable[EdgeKind],
        adjacency: dict[str, dict[EdgeKind, set[str]]],
    ) -> list[ComponentId]:
        kinds = frozenset(EdgeKind(k) for k in kinds)
        with self._lock:
            if start not in self._nodes:
                raise UnknownComponent(start)
            out: list[ComponentId] = []
            seen = {start}
            level = [start]
            while level:
                nxt: set[str] = set()
                for cur in level:
                    for kind in kinds:
                        nxt |= adjacency.get(cur, {}).get(kind, set()) - seen
                ordered = sorted(nxt)
                seen |= nxt
                out.extend(self._nodes[n].component for n in ordered)
                level = ordered
            return out

    def ancestors(self, component_id: str, kinds: Iterable[EdgeKind] = CAUSAL_KINDS) -> list[ComponentId]:
        """Transitive parents in BFS order, ties by id, start node excluded."""
        return self._walk(component_id, kinds, self._parents)

    def descendants(self, component_id: str, kinds: Iterable[EdgeKind] = CAUSAL_KINDS) -> list[ComponentId]:
        """Transitive children in BFS order, ties by id, start node excluded."""
        return self._walk(component_id, kinds, self._children)

    def ancestor_levels(self, component_id: str, kinds: Iterable[EdgeKind] = CAUSAL_KINDS) -> list[list[str]]:
        """Ancestor ids grouped by BFS depth (depth 1 first), each level sorted."""
        kinds = frozenset(EdgeKind(k) for k in kinds)
        with self._lock:
            if component_id not in self._nodes:
                raise UnknownComponent(component_id)
            levels: list[list[str]] = []
            seen = {component_id}
            level = [component_id]
            while level:
                nxt: set[str] = set()
                for cur in level:
                    for kind in kinds:
                        nxt |= self._parents.get(cur, {}).get(kind, set()) - seen
                if not nxt:
                    break
                ordered = sorted(nxt)
                seen |= nxt
                levels.append(ordered)
                level = ordered
            return levels

    # -- inference ----------------------------------------------------------------

    def infer_mapping(self, observations: Iterable[NormalizedEvent] = ()) -> MappingResult:
        """Join virtual nodes to physical hosts on the host_id attribute.

        Observation events may contribute host_id hints through a
        ``host_id=<id>`` token in their message (driver convention); node
        attributes take precedence. Idempotent: re-running adds nothing new.
        """
        hints: dict[str, str] = {}
        for ev in observations:
            m = _HOST_ATTR_RE.search(ev.message or "")
            if m:
                hints[ev.component.id] = m.group(1)
        added: list[RelationshipEdge] = []
        orphans: list[str] = []
        with self._lock:
            for node_id in sorted(self._nodes):
                node = self._nodes[node_id]
                if node.layer != Layer.VIRTUAL:
                    continue
                host_id = node.attrs.get(_HOST_ATTR, hints.get(node_id))
                if host_id is None:
                    orphans.append(node_id)
                    continue
                host_id = str(host_id)
                host = self._nodes.get(host_id)
                if host is None or host.layer != Layer.PHYSICAL:
                    orphans.append(node_id)
                    continue
                edge = RelationshipEdge(host.component, node.component, EdgeKind.HOSTS)
                if edge not in self._edges:
                    added.append(self.link(host_id, node_id, EdgeKind.HOSTS))
        return MappingResult(added=tuple(added), orphans=tuple(orphans))

    # -- configuration tracking ------------------------------------------------------

    def track_config(
        self,
        component_id: str,
        new_config: Mapping[str, Scalar],
        now_ms: int | None = None,
    ) -> NormalizedEvent | None:
        """Store a new config and emit a config.change event when it differs.

        Returns None (and stores nothing) when the canonical hash is unchanged.
        The event message lists added/removed/changed keys, each group sorted.
        """
        with self._lock:
            node = self.node(component_id)
            new_hash = canonical_config_hash(new_config)
            if new_hash == node.config_hash:
                return None
            old = node.config

            def canon(v: Scalar) -> Any:
                return float(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else v

            added = sorted(set(new_config) - set(old))
            removed = sorted(set(old) - set(new_config))
            changed = sorted(
                k for k in set(old) & set(new_config) if canon(old[k]) != canon(new_config[k])
            )
            parts = []
            if added:
                parts.append("added: " + ", ".join(added))
            if removed:
                parts.append("removed: " + ", ".join(removed))
            if changed:
                parts.append("changed: " + ", ".join(changed))
            node.config = dict(new_config)
            node.config_hash = new_hash
            occurred = int(time.time() * 1000) if now_ms is None else int(now_ms)
            return make_event(
                node.component,
                "config.change",
                Severity.INFO,
                occurred,
                message="; ".join(parts),
            )

    # -- import/export ------------------------------------------------------------

    def to_data(self) -> dict[str, Any]:
        with self._lock:
            return {
                "nodes": [
                    {
                        "id": n.component.id,
                        "kind": n.component.kind.value,
                        "attrs": dict(n.attrs),
                        "config": dict(n.config),
                    }
                    for n in self.nodes()
                ],
                "edges": [
                    {"parent": e.parent.id, "child": e.child.id, "kind": e.kind.value}
                    for e in self.edges()
                ],
            }

    @classmethod
    def from_data(cls, data: Mapping[str, Any]) -> "Topology":
        topo = cls()
        try:
            for entry in data.get("nodes", []):
                topo.upsert_node(
                    InventoryNode(
                        component=ComponentId(entry["id"], entry["kind"]),
                        attrs=entry.get("attrs", {}),
                        config=entry.get("config", {}),
                    )
                )
            for entry in data.get("edges", []):
                topo.link(entry["parent"], entry["child"], entry["kind"])
        except KeyError as exc:
            raise ConfigError(f"topology entry missing key {exc}") from None
        return topo

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_data(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Topology":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError("topology file must hold a mapping with nodes/edges")
        return cls.from_data(data)

    def export_text(self) -> str:
        """Deterministic text form; equal topologies export byte-identically."""
        return yaml.safe_dump(self.to_data(), sort_keys=True)
