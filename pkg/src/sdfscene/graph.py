"""Scene graphs: parsing, validation, prompt decomposition, step routing.

A scene is a set of named objects (nodes) plus pairwise relations (edges).
The graph decomposes into 1 + M + K text prompts (one global, one per
object, one per edge) and drives a cyclic training schedule of length M+1:
residues 0..M-1 are object steps (each optionally paired with one incident
edge, selected round-robin), residue M is the global scene step.
"""

import json
from dataclasses import dataclass, field
from typing import Optional


class GraphError(Exception):
    """Base class for graph file problems."""


class GraphSyntaxError(GraphError):
    """Malformed graph file: bad JSON, wrong types, missing keys."""


class GraphValidationError(GraphError):
    """Well-formed file describing an invalid graph."""


@dataclass(frozen=True)
class Node:
    name: str
    attributes: tuple = ()
    init_center: Optional[tuple] = None   # scene units, inside the bounds
    init_radius: Optional[float] = None   # scene units, > 0

    def prompt(self) -> str:
        """Object prompt: name joined with its attributes by commas."""
        return ", ".join((self.name,) + tuple(self.attributes))


@dataclass(frozen=True)
class Edge:
    subject: int
    object: int
    relation: str

    def key(self) -> tuple:
        """Unordered pair key used for duplicate detection."""
        return (min(self.subject, self.object), max(self.subject, self.object))


@dataclass(frozen=True)
class SceneGraph:
    global_prompt: str
    nodes: tuple
    edges: tuple

    @property
    def M(self) -> int:
        return len(self.nodes)

    @property
    def K(self) -> int:
        return len(self.edges)

    def incident_edges(self, i: int) -> list:
        """Indices into self.edges of edges touching node i, file order."""
        return [k for k, e in enumerate(self.edges) if i in (e.subject, e.object)]

    def validate(self, scene_bound: float = 1.0) -> None:
        m = self.M
        if m < 1:
            raise GraphValidationError("graph must contain at least one node")
        names = [n.name for n in self.nodes]
        if any(not n.strip() for n in names):
            raise GraphValidationError("node names must be nonempty")
        if len(set(names)) != m:
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise GraphValidationError(f"duplicate node names: {dupes}")
        if self.K > m * (m - 1) // 2:
            raise GraphValidationError(
                f"{self.K} edges exceeds C({m},2) = {m * (m - 1) // 2}")
        seen = set()
        for e in self.edges:
            if not (0 <= e.subject < m and 0 <= e.object < m):
                raise GraphValidationError(
                    f"edge ({e.subject},{e.object}) references a missing node")
            if e.subject == e.object:
                raise GraphValidationError(f"self-edge on node {e.subject}")
            if not e.relation.strip():
                raise GraphValidationError(
                    f"edge ({e.subject},{e.object}) has an empty relation")
            if e.key() in seen:
                raise GraphValidationError(
                    f"duplicate edge between nodes {e.key()}")
            seen.add(e.key())
        for n in self.nodes:
            if n.init_radius is not None and not n.init_radius > 0:
                raise GraphValidationError(
                    f"node {n.name!r}: init_radius must be > 0")
            if n.init_center is not None:
                if len(n.init_center) != 3:
                    raise GraphValidationError(
                        f"node {n.name!r}: init_center must have 3 components")
                if any(abs(c) >= scene_bound for c in n.init_center):
                    raise GraphValidationError(
                        f"node {n.name!r}: init_center outside scene bounds")


@dataclass(frozen=True)
class PromptSet:
    global_prompt: str
    object_prompts: tuple
    edge_prompts: dict   # (i, j) with i < j -> text

    def count(self) -> int:
        return 1 + len(self.object_prompts) + len(self.edge_prompts)

    def all_prompts(self) -> list:
        """Deterministic flat listing: global, objects, edges (key order)."""
        out = [self.global_prompt]
        out.extend(self.object_prompts)
        out.extend(self.edge_prompts[k] for k in sorted(self.edge_prompts))
        return out


@dataclass(frozen=True)
class StepPlan:
    step: int
    kind: str                             # "object" or "global"
    object_index: Optional[int] = None
    edge: Optional[tuple] = None          # (subject, object) as stored


def _require(cond, msg):
    if not cond:
        raise GraphSyntaxError(msg)


def _as_text(value, what) -> str:
    _require(isinstance(value, str), f"{what} must be a string, got {type(value).__name__}")
    return value


def parse_graph(source: str, scene_bound: float = 1.0) -> SceneGraph:
    """Parse graph JSON text into a validated SceneGraph.

    Schema: {"global_prompt": str,
             "nodes": [{"name": str, "attributes": [str]?,
                        "init_center": [x,y,z]?, "init_radius": r?}],
             "edges": [{"subject": idx|name, "object": idx|name,
                        "relation": str}]}
    Edge endpoints may be 0-based indices or node names.
    """
    try:
        raw = json.loads(source)
    except json.JSONDecodeError as exc:
        raise GraphSyntaxError(f"invalid JSON: {exc}") from exc
    _require(isinstance(raw, dict), "graph file must be a JSON object")
    _require("global_prompt" in raw, "missing key: global_prompt")
    _require("nodes" in raw, "missing key: nodes")
    gp = _as_text(raw["global_prompt"], "global_prompt")
    raw_nodes = raw["nodes"]
    _require(isinstance(raw_nodes, list), "nodes must be a list")

    nodes = []
    for k, item in enumerate(raw_nodes):
        _require(isinstance(item, dict), f"node {k} must be an object")
        _require("name" in item, f"node {k}: missing key: name")
        name = _as_text(item["name"], f"node {k} name")
        attrs = item.get("attributes", [])
        _require(isinstance(attrs, list), f"node {k}: attributes must be a list")
        attrs = tuple(_as_text(a, f"node {k} attribute") for a in attrs)
        center = item.get("init_center")
        if center is not None:
            _require(isinstance(center, list) and
                     all(isinstance(c, (int, float)) for c in center),
                     f"node {k}: init_center must be a numeric list")
            center = tuple(float(c) for c in center)
        radius = item.get("init_radius")
        if radius is not None:
            _require(isinstance(radius, (int, float)),
                     f"node {k}: init_radius must be a number")
            radius = float(radius)
        nodes.append(Node(name, attrs, center, radius))

    name_to_index = {}
    for k, n in enumerate(nodes):
        name_to_index.setdefault(n.name, k)   # duplicates rejected in validate

    def resolve(ref, what):
        if isinstance(ref, bool):
            raise GraphSyntaxError(f"{what} must be an index or node name")
        if isinstance(ref, int):
            return ref
        if isinstance(ref, str):
            if ref not in name_to_index:
                raise GraphValidationError(f"{what} references unknown node {ref!r}")
            return name_to_index[ref]
        raise GraphSyntaxError(f"{what} must be an index or node name")

    edges = []
    for k, item in enumerate(raw.get("edges", [])):
        _require(isinstance(item, dict), f"edge {k} must be an object")
        for key in ("subject", "object", "relation"):
            _require(key in item, f"edge {k}: missing key: {key}")
        edges.append(Edge(resolve(item["subject"], f"edge {k} subject"),
                          resolve(item["object"], f"edge {k} object"),
                          _as_text(item["relation"], f"edge {k} relation")))

    g = SceneGraph(gp, tuple(nodes), tuple(edges))
    g.validate(scene_bound=scene_bound)
    return g


def load_graph(path, scene_bound: float = 1.0) -> SceneGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_graph(fh.read(), scene_bound=scene_bound)


def decompose_prompts(g: SceneGraph, edge_style: str = "full") -> PromptSet:
    """Build the 1+M+K prompt set.

    Object prompts join the node name with its attributes by commas. Edge
    prompts read "<subject> <relation> <object>" where the endpoints are
    full object prompts (edge_style="full") or bare node names
    (edge_style="bare").
    """
    if edge_style not in ("full", "bare"):
        raise ValueError(f"edge_style must be 'full' or 'bare', got {edge_style!r}")
    obj = tuple(n.prompt() for n in g.nodes)
    edge_prompts = {}
    for e in g.edges:
        if edge_style == "bare":
            s, o = g.nodes[e.subject].name, g.nodes[e.object].name
        else:
            s, o = obj[e.subject], obj[e.object]
        edge_prompts[e.key()] = f"{s} {e.relation} {o}"
    return PromptSet(g.global_prompt, obj, edge_prompts)


class EdgeRotation:
    """Per-node round-robin counters for incident-edge selection.

    Owned by the trainer so that plans for successive steps advance fairly;
    the counters are plain state (dict node index -> count) and serialize
    with the training checkpoint.
    """

    def __init__(self, counters: Optional[dict] = None):
        self.counters = dict(counters or {})

    def next_edge(self, g: SceneGraph, i: int) -> Optional[tuple]:
        incident = g.incident_edges(i)
        if not incident:
            return None
        c = self.counters.get(i, 0)
        self.counters[i] = c + 1
        e = g.edges[incident[c % len(incident)]]
        return (e.subject, e.object)

    def state(self) -> dict:
        return dict(self.counters)


def build_step_plan(g: SceneGraph, s: int, rotation: Optional[EdgeRotation] = None) -> StepPlan:
    """Route step s: residue M of the (M+1)-cycle is the global step,
    residues 0..M-1 train object i = s mod (M+1) plus one incident edge.

    Without a rotation the edge choice is stateless (derived from how many
    times node i has been scheduled up to step s); passing a persistent
    EdgeRotation lets the trainer keep fairness across resumed runs.
    """
    if s < 0:
        raise ValueError("step index must be nonnegative")
    m = g.M
    r = s % (m + 1)
    if r == m:
        return StepPlan(step=s, kind="global")
    if rotation is not None:
        edge = rotation.next_edge(g, r)
    else:
        incident = g.incident_edges(r)
        if incident:
            times_scheduled = s // (m + 1)   # node r runs once per cycle
            e = g.edges[incident[times_scheduled % len(incident)]]
            edge = (e.subject, e.object)
        else:
            edge = None
    return StepPlan(step=s, kind="object", object_index=r, edge=edge)
