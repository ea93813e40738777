"""Auxiliary gate-signal sources: the security expert scorer and the
cybersecurity knowledge graph.

The expert is a small trainable head over the pooled user representation,
squashed to (0, 1). The graph is an immutable store of typed risk nodes;
matching is exact contiguous-subsequence search over token ids, and risk
propagates along alias_of/indicates edges with multiplicative weight decay
to depth 2, combined by max so scores stay in [0, 1] and adding matches
never lowers the score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import numkernel as nk
from .errors import ContractError, ShapeError
from .numkernel import Tensor

RISK_PROPAGATION_DEPTH = 2


class Relation(str, Enum):
    INDICATES = "indicates"
    ALIAS_OF = "alias_of"
    MITIGATES = "mitigates"


# Only these relations carry risk toward their target.
_PROPAGATING = (Relation.ALIAS_OF, Relation.INDICATES)


@dataclass
class GraphNode:
    id: str
    surface_forms: list[tuple[int, ...]]
    risk: float
    embedding: np.ndarray | None = None


@dataclass
class GraphEdge:
    src: str
    dst: str
    relation: Relation
    weight: float

    def __post_init__(self) -> None:
        self.relation = Relation(self.relation)


class SecurityGraph:
    """Typed risk graph; immutable after construction."""

    def __init__(self, nodes: Sequence[GraphNode], edges: Sequence[GraphEdge]):
        self.nodes: dict[str, GraphNode] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise ContractError(f"duplicate node id {n.id!r}")
            self.nodes[n.id] = n
        self.edges = list(edges)
        self._out: dict[str, list[GraphEdge]] = {nid: [] for nid in self.nodes}
        for e in self.edges:
            if e.src in self._out:
                self._out[e.src].append(e)

    def outgoing(self, node_id: str) -> list[GraphEdge]:
        return self._out.get(node_id, [])

    def ensure_embeddings(self, d_kg: int, rng: np.random.Generator) -> None:
        """Fill in missing node embeddings from the graph RNG stream."""
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            if node.embedding is None:
                node.embedding = rng.normal(0.0, 0.02, size=d_kg)

    # serialization ----------------------------------------------------

    def to_json_obj(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "surface_forms": [list(sf) for sf in n.surface_forms],
                    "risk": n.risk,
                    **(
                        {"embedding": [float(v) for v in n.embedding]}
                        if n.embedding is not None
                        else {}
                    ),
                }
                for n in self.nodes.values()
            ],
            "edges": [
                {"src": e.src, "dst": e.dst, "relation": e.relation.value, "weight": e.weight}
                for e in self.edges
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SecurityGraph":
        nodes = [
            GraphNode(
                id=n["id"],
                surface_forms=[tuple(int(t) for t in sf) for sf in n["surface_forms"]],
                risk=float(n["risk"]),
                embedding=(
                    np.asarray(n["embedding"], dtype=np.float64)
                    if "embedding" in n
                    else None
                ),
            )
            for n in obj["nodes"]
        ]
        edges = [
            GraphEdge(
                src=e["src"],
                dst=e["dst"],
                relation=Relation(e["relation"]),
                weight=float(e["weight"]),
            )
            for e in obj["edges"]
        ]
        return cls(nodes, edges)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=2)

    @classmethod
    def load(cls, path, d_kg: int | None = None, rng: np.random.Generator | None = None) -> "SecurityGraph":
        with open(path, "r", encoding="utf-8") as fh:
            graph = cls.from_json_obj(json.load(fh))
        if d_kg is not None and rng is not None:
            graph.ensure_embeddings(d_kg, rng)
        return graph


def validate_graph(graph: SecurityGraph) -> list[str]:
    """All invariant violations, each naming the offending node or edge."""
    problems = []
    for nid, node in graph.nodes.items():
        if not 0.0 <= node.risk <= 1.0:
            problems.append(f"node {nid!r}: risk {node.risk} outside [0, 1]")
    for i, e in enumerate(graph.edges):
        tag = f"edge #{i} ({e.src!r} -> {e.dst!r})"
        if e.src not in graph.nodes:
            problems.append(f"{tag}: unknown source node")
        if e.dst not in graph.nodes:
            problems.append(f"{tag}: unknown target node")
        if not 0.0 <= e.weight <= 1.0:
            problems.append(f"{tag}: weight {e.weight} outside [0, 1]")
    return problems


def match_entities(user_tokens: Sequence[int], graph: SecurityGraph) -> set[str]:
    """Ids of nodes whose surface form occurs contiguously in the tokens."""
    toks = tuple(user_tokens)
    matched = set()
    for nid, node in graph.nodes.items():
        for form in node.surface_forms:
            k = len(form)
            if k == 0 or k > len(toks):
                continue
            if any(toks[i : i + k] == tuple(form) for i in range(len(toks) - k + 1)):
                matched.add(nid)
                break
    return matched


def _effective_risk(graph: SecurityGraph, node_id: str, depth: int) -> float:
    node = graph.nodes[node_id]
    best = node.risk
    if depth > 0:
        for e in graph.outgoing(node_id):
            if e.relation in _PROPAGATING and e.dst in graph.nodes:
                best = max(best, e.weight * _effective_risk(graph, e.dst, depth - 1))
    return best


def ckg_score(matched: Iterable[str], graph: SecurityGraph) -> float:
    """Graph risk score K(U): max effective risk over matched nodes, else 0."""
    matched = set(matched)
    unknown = matched - graph.nodes.keys()
    if unknown:
        raise ContractError(f"matched ids not in graph: {sorted(unknown)}")
    if not matched:
        return 0.0
    return max(_effective_risk(graph, nid, RISK_PROPAGATION_DEPTH) for nid in matched)


def ckg_context(
    matched: Iterable[str], graph: SecurityGraph, projection: Tensor
) -> Tensor:
    """Mean matched-node embedding projected to model width.

    Diagnostic output only; it is logged but never fed into fusion.
    """
    d_kg, d = projection.shape
    ids = sorted(set(matched))
    if not ids:
        return Tensor(np.zeros(d))
    vecs = []
    for nid in ids:
        node = graph.nodes[nid]
        if node.embedding is None:
            raise ContractError(f"node {nid!r} has no embedding")
        vecs.append(node.embedding)
    mean_vec = np.mean(vecs, axis=0)
    if mean_vec.shape != (d_kg,):
        raise ShapeError(f"embedding dim {mean_vec.shape} vs projection {projection.shape}")
    return Tensor(mean_vec @ projection.data)


# ----------------------------------------------------------------------
# Security expert head
# ----------------------------------------------------------------------


@dataclass
class ExpertParams:
    """Small feed-forward scorer over the pooled user representation."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def build(cls, d_model: int, hidden: int, rng: np.random.Generator) -> "ExpertParams":
        import math

        std1 = math.sqrt(2.0 / (d_model + hidden))
        std2 = math.sqrt(2.0 / (hidden + 1))
        return cls(
            w1=Tensor(rng.normal(0.0, std1, size=(d_model, hidden)), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(rng.normal(0.0, std2, size=(hidden, 1)), requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True),
        )

    def tensors(self, prefix: str = "expert"):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def expert_score(head: ExpertParams, user_pooled: Tensor) -> Tensor:
    """Adversarialness score E(U) in (0, 1); scalar tensor, differentiable."""
    d = head.w1.shape[0]
    if user_pooled.shape != (d,):
        raise ShapeError(f"expert_score: pooled input {user_pooled.shape}, expected ({d},)")
    x = user_pooled.reshape((1, d))
    h = (nk.matmul(x, head.w1) + head.b1).tanh()
    logit = nk.matmul(h, head.w2) + head.b2
    return logit.reshape(()).sigmoid()


# ----------------------------------------------------------------------
# Gate signal record
# ----------------------------------------------------------------------


@dataclass
class GateSignals:
    """The four gating quantities for one example.

    The float fields are the record of truth; the optional tensor fields
    carry the differentiable path during training and always agree with
    the floats.
    """

    alpha0: float
    expert: float
    ckg: float
    alpha_eff: float
    alpha0_t: Tensor | None = field(default=None, repr=False, compare=False)
    expert_t: Tensor | None = field(default=None, repr=False, compare=False)
    alpha_eff_t: Tensor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        for name in ("alpha0", "expert", "ckg", "alpha_eff"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"GateSignals.{name}={v} outside [0, 1]")
        if self.alpha_eff != max(self.alpha0, self.expert, self.ckg):
            raise ContractError(
                f"alpha_eff {self.alpha_eff} != max{(self.alpha0, self.expert, self.ckg)}"
            )

    def to_json_obj(self) -> dict:
        return {
            "alpha0": self.alpha0,
            "expert": self.expert,
            "ckg": self.ckg,
            "alpha_eff": self.alpha_eff,
        }


# ----------------------------------------------------------------------
# Default graph
# ----------------------------------------------------------------------


def default_security_graph(vocab, rng: np.random.Generator, d_kg: int = 16) -> SecurityGraph:
    """Risk graph covering the corpus's trigger tokens and their aliases.

    Alias nodes carry no risk of their own; their score comes entirely from
    alias_of edges into the trigger nodes, which is what lets the graph
    catch obfuscated payloads the expert has never seen.
    """
    from .corpus import INJ_FORGET_ID, INJ_REVEAL_ID, POLICY_OPEN_ID

    aliases = list(vocab.alias_ids)
    half = len(aliases) // 2
    nodes = [
        GraphNode("override-directive", [(INJ_FORGET_ID,)], risk=0.95),
        GraphNode("exfiltration-directive", [(INJ_REVEAL_ID,)], risk=0.95),
        GraphNode("policy-wrapper", [(POLICY_OPEN_ID,)], risk=0.5),
        GraphNode("refusal-guidance", [], risk=0.0),
    ]
    edges = [
        GraphEdge("policy-wrapper", "override-directive", Relation.INDICATES, 0.7),
        GraphEdge("refusal-guidance", "override-directive", Relation.MITIGATES, 0.5),
    ]
    for i, tok in enumerate(aliases):
        target = "override-directive" if i < half else "exfiltration-directive"
        nid = f"alias-{vocab.symbol_of(tok)}"
        nodes.append(GraphNode(nid, [(tok,)], risk=0.0))
        edges.append(GraphEdge(nid, target, Relation.ALIAS_OF, 0.95))
    graph = SecurityGraph(nodes, edges)
    graph.ensure_embeddings(d_kg, rng)
    return graph
