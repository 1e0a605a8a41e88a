"""Typed reasoning graphs parsed from model-emitted DOT, plus graph metrics.

The parser covers the DOT subset such extractions actually use: a digraph
header, ``rankdir`` and other graph attributes, node statements with
``label``/``fillcolor`` attributes, ``->`` edge chains, quoted identifiers,
and comments. Node status derives from fill color (lightblue = success,
lightpink = failed); the problem and answer anchors are found by label.

Metric conventions, fixed here and mirrored by the test oracle:

* step nodes = all nodes except the problem/answer anchors; anchors are
  scaffolding, never attempts, so they are excluded from failed-step counts
  and from the orphaned-step denominator, but they do participate in path
  and degree metrics;
* failed nodes = failed-status step nodes; success nodes = success-status
  nodes of any kind;
* distances are directed edge counts via BFS; duplicate edges collapse;
* metrics whose inputs are absent (no failed node, no answer node, no
  decision point, zero step nodes) are ``None`` rather than an error.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

SUCCESS_COLOR = "lightblue"
FAILED_COLOR = "lightpink"

PROBLEM_LABEL = "problem statement"
ANSWER_LABEL = "final answer"


class GraphParseError(ValueError):
    """DOT input the parser cannot accept; message carries line:col."""


@dataclass(frozen=True)
class Node:
    id: str
    label: str
    status: str  # "success" | "failed"


@dataclass
class ReasoningGraph:
    nodes: list[Node]
    edges: list[tuple[str, str]]
    problem_node: str
    answer_node: Optional[str]
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {n.id: n for n in self.nodes}
        if len(self._by_id) != len(self.nodes):
            raise GraphParseError("duplicate node ids")
        for a, b in self.edges:
            if a not in self._by_id or b not in self._by_id:
                raise GraphParseError(f"edge ({a!r}, {b!r}) references unknown node")
        if self.problem_node not in self._by_id:
            raise GraphParseError(f"problem node {self.problem_node!r} not in graph")
        if self.answer_node is not None and self.answer_node not in self._by_id:
            raise GraphParseError(f"answer node {self.answer_node!r} not in graph")
        succ: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        pred: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        seen = set()
        for a, b in self.edges:
            if (a, b) in seen:
                continue
            seen.add((a, b))
            succ[a].append(b)
            pred[b].append(a)
        self._succ = succ
        self._pred = pred

    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def successors(self, node_id: str) -> list[str]:
        return self._succ[node_id]

    def predecessors(self, node_id: str) -> list[str]:
        return self._pred[node_id]

    @property
    def anchor_ids(self) -> set[str]:
        out = {self.problem_node}
        if self.answer_node is not None:
            out.add(self.answer_node)
        return out

    def step_node_ids(self) -> list[str]:
        anchors = self.anchor_ids
        return [n.id for n in self.nodes if n.id not in anchors]

    def failed_node_ids(self) -> list[str]:
        anchors = self.anchor_ids
        return [n.id for n in self.nodes if n.status == "failed" and n.id not in anchors]

    def success_node_ids(self) -> list[str]:
        return [n.id for n in self.nodes if n.status == "success"]


# ---------------------------------------------------------------------------
# DOT parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Token:
    kind: str  # "id" | "punct"
    value: str
    line: int
    col: int

    def pos(self) -> str:
        return f"line {self.line}, col {self.col}"


# Hyphens are tolerated inside bare ids but never consume the '->' arrow.
_BARE_ID = re.compile(r"-?[\w.]+(?:-+(?!>)[\w.]+)*")


def _tokenize(text: str, line0: int = 1) -> list[_Token]:
    tokens = []
    i = 0
    line = line0
    col = 1
    n = len(text)

    def advance(k):
        nonlocal i, line, col
        for _ in range(k):
            if i < n and text[i] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1

    while i < n:
        c = text[i]
        if c.isspace():
            advance(1)
            continue
        if text.startswith("//", i) or c == "#":
            j = text.find("\n", i)
            advance((j if j != -1 else n) - i)
            continue
        if text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j == -1:
                raise GraphParseError(f"unterminated comment at line {line}, col {col}")
            advance(j + 2 - i)
            continue
        if text.startswith("->", i):
            tokens.append(_Token("punct", "->", line, col))
            advance(2)
            continue
        if c in "{}[]=;,":
            tokens.append(_Token("punct", c, line, col))
            advance(1)
            continue
        if c == '"':
            j = i + 1
            buf = []
            while j < n:
                if text[j] == "\\" and j + 1 < n:
                    buf.append(text[j + 1])
                    j += 2
                    continue
                if text[j] == '"':
                    break
                buf.append(text[j])
                j += 1
            if j >= n:
                raise GraphParseError(f"unterminated string at line {line}, col {col}")
            tokens.append(_Token("id", "".join(buf), line, col))
            advance(j + 1 - i)
            continue
        m = _BARE_ID.match(text, i)
        if m:
            tokens.append(_Token("id", m.group(0), line, col))
            advance(m.end() - i)
            continue
        raise GraphParseError(f"unexpected character {c!r} at line {line}, col {col}")
    return tokens


_DIGRAPH_HEADER = re.compile(
    r"\b(?:strict\s+)?digraph\b\s*(?:\"[^\"]*\"|[\w.]+)?\s*\{", re.IGNORECASE
)


def _find_digraph_block(text: str) -> tuple[str, int]:
    """Locate the first digraph block; return (body, starting line number)."""
    m = _DIGRAPH_HEADER.search(text)
    if m is None:
        raise GraphParseError("no digraph block found")
    open_brace = m.end() - 1
    depth = 0
    i = open_brace
    in_string = False
    while i < len(text):
        c = text[i]
        if in_string:
            if c == "\\":
                i += 2
                continue
            if c == '"':
                in_string = False
        elif c == '"':
            in_string = True
        elif c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                body = text[open_brace + 1 : i]
                line0 = text.count("\n", 0, open_brace + 1) + 1
                return body, line0
        i += 1
    raise GraphParseError("unbalanced braces in digraph block")


def _parse_attr_list(tokens: list[_Token], i: int) -> tuple[dict[str, str], int]:
    """Parse one or more ``[k=v, ...]`` groups starting at index *i*."""
    attrs: dict[str, str] = {}
    while i < len(tokens) and tokens[i].value == "[" and tokens[i].kind == "punct":
        open_tok = tokens[i]
        i += 1
        while i < len(tokens) and not (tokens[i].kind == "punct" and tokens[i].value == "]"):
            tok = tokens[i]
            if tok.kind == "punct" and tok.value in (",", ";"):
                i += 1
                continue
            if tok.kind != "id":
                raise GraphParseError(f"expected attribute name at {tok.pos()}")
            name = tok.value
            if i + 2 < len(tokens) and tokens[i + 1].value == "=" and tokens[i + 1].kind == "punct":
                value_tok = tokens[i + 2]
                if value_tok.kind != "id":
                    raise GraphParseError(f"expected attribute value at {value_tok.pos()}")
                attrs[name.lower()] = value_tok.value
                i += 3
            else:
                attrs[name.lower()] = "true"
                i += 1
        if i >= len(tokens):
            raise GraphParseError(f"unterminated attribute list opened at {open_tok.pos()}")
        i += 1  # closing ]
    return attrs, i


def parse_dot(text: str) -> ReasoningGraph:
    """Parse the first digraph block found anywhere in *text*.

    Prose or code fences around the block are ignored. Raises
    :class:`GraphParseError` when there is no digraph, on syntax errors
    (position-reported), and when no problem-statement node exists.
    """
    body, line0 = _find_digraph_block(text)
    tokens = _tokenize(body, line0)

    node_order: list[str] = []
    node_attrs: dict[str, dict[str, str]] = {}
    edges: list[tuple[str, str]] = []
    node_defaults: dict[str, str] = {}
    graph_attrs: dict[str, str] = {}

    def touch(node_id: str):
        if node_id not in node_attrs:
            node_order.append(node_id)
            node_attrs[node_id] = dict(node_defaults)

    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind == "punct":
            if tok.value == ";":
                i += 1
                continue
            raise GraphParseError(f"unexpected {tok.value!r} at {tok.pos()}")
        low = tok.value.lower()
        if low == "subgraph":
            raise GraphParseError(f"subgraphs are not supported (at {tok.pos()})")
        if low in ("graph", "node", "edge") and i + 1 < len(tokens) and tokens[i + 1].value == "[":
            attrs, i = _parse_attr_list(tokens, i + 1)
            if low == "node":
                node_defaults.update(attrs)
            elif low == "graph":
                graph_attrs.update(attrs)
            continue
        if i + 1 < len(tokens) and tokens[i + 1].kind == "punct" and tokens[i + 1].value == "=":
            if i + 2 >= len(tokens) or tokens[i + 2].kind != "id":
                raise GraphParseError(f"expected value after '=' at {tok.pos()}")
            graph_attrs[low] = tokens[i + 2].value
            i += 3
            continue
        # Node statement or edge chain.
        chain = [tok.value]
        j = i + 1
        while j + 1 < len(tokens) and tokens[j].kind == "punct" and tokens[j].value == "->":
            nxt = tokens[j + 1]
            if nxt.kind != "id":
                raise GraphParseError(f"expected node id after '->' at {nxt.pos()}")
            chain.append(nxt.value)
            j += 2
        if j < len(tokens) and tokens[j].kind == "punct" and tokens[j].value == "->":
            raise GraphParseError(f"dangling '->' at {tokens[j].pos()}")
        attrs, j = _parse_attr_list(tokens, j)
        if len(chain) == 1:
            touch(chain[0])
            node_attrs[chain[0]].update(attrs)
        else:
            for nid in chain:
                touch(nid)
            for a, b in zip(chain, chain[1:]):
                edges.append((a, b))
        i = j

    if not node_order:
        raise GraphParseError("digraph block declares no nodes")

    warnings: list[str] = []

    def normalized_label(nid: str) -> str:
        label = node_attrs[nid].get("label", nid)
        return re.sub(r"[\s_]+", " ", label).casefold().strip()

    problem = next((nid for nid in node_order if PROBLEM_LABEL in normalized_label(nid)), None)
    if problem is None:
        raise GraphParseError("no problem-statement node in digraph")
    answer = next(
        (nid for nid in node_order if nid != problem and ANSWER_LABEL in normalized_label(nid)),
        None,
    )

    anchors = {problem} | ({answer} if answer else set())
    nodes = []
    for nid in node_order:
        attrs = node_attrs[nid]
        label = attrs.get("label", nid)
        color = attrs.get("fillcolor", "").lower()
        if color == FAILED_COLOR:
            status = "failed"
        elif color == SUCCESS_COLOR:
            status = "success"
        else:
            status = "success"
            if nid not in anchors:
                if color:
                    warnings.append(f"node {nid!r}: unknown fillcolor {color!r}, treated as success")
                else:
                    warnings.append(f"node {nid!r}: no fillcolor, treated as success")
        nodes.append(Node(id=nid, label=label, status=status))

    return ReasoningGraph(
        nodes=nodes,
        edges=edges,
        problem_node=problem,
        answer_node=answer,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class GraphMetricVector:
    fsf: Optional[float]
    recovery_efficiency: Optional[float]
    branching_quality: Optional[float]
    flow_coherence: Optional[float]
    reasoning_depth: Optional[int]
    orphaned_steps: Optional[float]
    information_cascade: float
    cross_reference_density: float
    reasoning_efficiency: Optional[float]
    shortest_path_coverage: Optional[float]
    endpoint_reachability: Optional[float]
    min_error_depth: Optional[int]
    first_failed_step_depth: Optional[int]
    total_steps: int
    mean_out_degree: float
    max_failed_children: int

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in GRAPH_METRIC_NAMES}


GRAPH_METRIC_NAMES = (
    "fsf",
    "recovery_efficiency",
    "branching_quality",
    "flow_coherence",
    "reasoning_depth",
    "orphaned_steps",
    "information_cascade",
    "cross_reference_density",
    "reasoning_efficiency",
    "shortest_path_coverage",
    "endpoint_reachability",
    "min_error_depth",
    "first_failed_step_depth",
    "total_steps",
    "mean_out_degree",
    "max_failed_children",
)


def _bfs_distances(adj: dict[str, list[str]], source: str) -> dict[str, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def fsf(g: ReasoningGraph) -> Optional[float]:
    """Failed step nodes over all step nodes; None when there are no steps."""
    steps = g.step_node_ids()
    if not steps:
        return None
    failed = g.failed_node_ids()
    return len(failed) / len(steps)


def _canonical_shortest_path(g: ReasoningGraph) -> Optional[list[str]]:
    """BFS parent-pointer path problem->answer, successors visited in
    lexicographic id order so ties break deterministically."""
    if g.answer_node is None:
        return None
    parent: dict[str, Optional[str]] = {g.problem_node: None}
    queue = deque([g.problem_node])
    while queue:
        u = queue.popleft()
        for v in sorted(g.successors(u)):
            if v not in parent:
                parent[v] = u
                queue.append(v)
    if g.answer_node not in parent:
        return None
    path = [g.answer_node]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    path.reverse()
    return path


def compute_graph_metrics(g: ReasoningGraph) -> GraphMetricVector:
    """Compute the full metric vector with directed BFS distances.

    ``flow_coherence`` and ``reasoning_efficiency`` both measure the
    fraction of nodes on some problem-to-answer path but are computed by
    two independent routes (forward+reverse reachability intersection vs.
    a per-node check); they must agree on every graph.
    """
    all_ids = [n.id for n in g.nodes]
    n_nodes = len(all_ids)
    steps = g.step_node_ids()
    failed = g.failed_node_ids()
    success = set(g.success_node_ids())
    succ = {nid: g.successors(nid) for nid in all_ids}
    pred = {nid: g.predecessors(nid) for nid in all_ids}

    fsf_value = (len(failed) / len(steps)) if steps else None

    # Recovery efficiency: mean shortest directed distance failed -> success.
    recovery = None
    if failed:
        dists = []
        for f in failed:
            dist = _bfs_distances(succ, f)
            reachable = [d for nid, d in dist.items() if nid in success and nid != f]
            if reachable:
                dists.append(min(reachable))
        if dists:
            recovery = sum(dists) / len(dists)

    # Branching quality: decision points with at least one success successor.
    decision_points = [nid for nid in all_ids if len(succ[nid]) >= 2]
    branching = None
    if decision_points:
        good = sum(1 for nid in decision_points if any(v in success for v in succ[nid]))
        branching = good / len(decision_points)

    from_problem = _bfs_distances(succ, g.problem_node)

    # Depth and the canonical shortest path.
    depth = None
    coverage = None
    if g.answer_node is not None and g.answer_node in from_problem:
        depth = from_problem[g.answer_node]
        path = _canonical_shortest_path(g)
        coverage = len(path) / n_nodes

    # Flow coherence: reachable from problem AND co-reachable to answer.
    flow = None
    if g.answer_node is not None:
        to_answer = _bfs_distances(pred, g.answer_node)
        on_path = [nid for nid in all_ids if nid in from_problem and nid in to_answer]
        flow = len(on_path) / n_nodes

    # Reasoning efficiency: same quantity, independent per-node computation.
    efficiency = None
    if g.answer_node is not None:
        count = 0
        for nid in all_ids:
            if nid not in _bfs_distances(succ, g.problem_node):
                continue
            if g.answer_node in _bfs_distances(succ, nid):
                count += 1
        efficiency = count / n_nodes

    orphaned = None
    if steps:
        orphans = sum(1 for nid in steps if not pred[nid])
        orphaned = orphans / len(steps)

    # Information cascade: mean count of strictly-downstream nodes.
    downstream_total = 0
    for nid in all_ids:
        reach = _bfs_distances(succ, nid)
        downstream_total += sum(1 for m in reach if m != nid)
    cascade = downstream_total / n_nodes

    cross_ref = sum(1 for nid in all_ids if len(pred[nid]) >= 2) / n_nodes

    reachability = None
    if g.answer_node is not None:
        hits = sum(1 for nid in all_ids if g.answer_node in _bfs_distances(succ, nid))
        reachability = hits / n_nodes

    error_depth = None
    if failed:
        ds = [from_problem[f] for f in failed if f in from_problem]
        if ds:
            error_depth = min(ds)

    mean_out = sum(len(succ[nid]) for nid in all_ids) / n_nodes
    failed_set = set(failed)
    max_failed_children = max(
        (sum(1 for v in succ[nid] if v in failed_set) for nid in all_ids), default=0
    )

    return GraphMetricVector(
        fsf=fsf_value,
        recovery_efficiency=recovery,
        branching_quality=branching,
        flow_coherence=flow,
        reasoning_depth=depth,
        orphaned_steps=orphaned,
        information_cascade=cascade,
        cross_reference_density=cross_ref,
        reasoning_efficiency=efficiency,
        shortest_path_coverage=coverage,
        endpoint_reachability=reachability,
        min_error_depth=error_depth,
        first_failed_step_depth=error_depth,
        total_steps=len(steps),
        mean_out_degree=mean_out,
        max_failed_children=max_failed_children,
    )
