"""End-to-end retrieval: gates -> subgraph -> paths -> documents -> prompt.

Path extraction is a depth-first enumeration of simple paths through the
selected subgraph, treating edges as traversable in both directions, with
children expanded in ascending (relation id, neighbor id) order and a hard
cap on the number of emitted paths.  Document relevance aggregates entity
importance weights through the entity-chunk incidence.  The prompt
renderer is byte-exact and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ValidationError
from .kg import Corpus, EntityDocIndex, KnowledgeGraph, tokenize
from .retriever import GraphCache, QueryContext, RetrieverParams, forward
from .selector import (
    SelectorParams,
    SubgraphSelection,
    gate_probabilities,
    induce_subgraph,
    query_conditioned_embedding,
)

SYSTEM_LINE = (
    "As an advanced reading comprehension assistant, your task is to analyze "
    "text passages and corresponding questions meticulously. Your responses "
    "start after ..."
)


@dataclass
class InferenceConfig:
    top_k: int = 5
    dfs_depth: int = 3
    path_penalty: float = 0.1  # per-hop depth penalty weight
    epsilon: float = 0.5
    max_paths: int = 256
    max_keep: int = 5
    tau_gumbel: float = 0.5
    gate: str = "standard"
    fallback_starts: int = 3

    def __post_init__(self):
        if self.top_k < 1 or self.max_keep < 1:
            raise ConfigError("top_k and max_keep must be >= 1")
        if self.dfs_depth < 1:
            raise ConfigError("dfs_depth must be >= 1")
        if self.max_paths < 1:
            raise ConfigError("max_paths must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")


@dataclass
class ReasoningPath:
    nodes: tuple[int, ...]
    relations: tuple[int, ...]
    score: float | None = None

    def __post_init__(self):
        if len(self.relations) != len(self.nodes) - 1 or len(self.relations) < 1:
            raise ValidationError(
                f"path with {len(self.nodes)} nodes needs {len(self.nodes) - 1} relations (>= 1)"
            )
        if len(set(self.nodes)) != len(self.nodes):
            raise ValidationError("reasoning paths must be simple (no repeated node)")


@dataclass(frozen=True)
class RankedDoc:
    doc_id: str
    score: float


@dataclass
class PromptBundle:
    prompt_text: str
    docs: list  # RankedDoc, descending score
    paths: list  # ReasoningPath, selected and ordered
    query_text: str
    empty_graph: bool = False

    def to_json(self) -> dict:
        return {
            "query": self.query_text,
            "docs": [{"doc_id": d.doc_id, "score": d.score} for d in self.docs],
            "paths": [
                {"nodes": list(p.nodes), "relations": list(p.relations), "score": p.score}
                for p in self.paths
            ],
            "prompt": self.prompt_text,
        }

    @staticmethod
    def from_json(obj: dict) -> "PromptBundle":
        return PromptBundle(
            prompt_text=obj["prompt"],
            docs=[RankedDoc(d["doc_id"], d["score"]) for d in obj["docs"]],
            paths=[
                ReasoningPath(tuple(p["nodes"]), tuple(p["relations"]), p["score"])
                for p in obj["paths"]
            ],
            query_text=obj["query"],
        )


# ----------------------------------------------------------------------
# path extraction and scoring
# ----------------------------------------------------------------------


def extract_paths(
    selection: SubgraphSelection, start, hop_budget: int, max_paths: int | None = 256
) -> list[ReasoningPath]:
    """All simple paths of 1..hop_budget hops through the selected edges,
    both directions traversable, children in ascending (relation, neighbor)
    order; enumeration stops once max_paths paths were emitted."""
    children: dict[int, list] = {}
    for h, r, t in selection.triples:
        children.setdefault(h, set()).add((r, t))
        children.setdefault(t, set()).add((r, h))
    children = {node: sorted(outs) for node, outs in children.items()}
    cap = float("inf") if max_paths is None else int(max_paths)

    out: list[ReasoningPath] = []
    nodes_on_path: list[int] = []
    rels_on_path: list[int] = []
    on_path: set[int] = set()

    def dfs(node: int):
        if len(out) >= cap or len(rels_on_path) >= hop_budget:
            return
        for r, nb in children.get(node, ()):
            if nb in on_path:
                continue
            nodes_on_path.append(nb)
            rels_on_path.append(r)
            on_path.add(nb)
            out.append(ReasoningPath(tuple(nodes_on_path), tuple(rels_on_path)))
            if len(out) < cap:
                dfs(nb)
            nodes_on_path.pop()
            rels_on_path.pop()
            on_path.discard(nb)
            if len(out) >= cap:
                return

    for s in sorted(set(start)):
        if len(out) >= cap:
            break
        nodes_on_path = [s]
        rels_on_path = []
        on_path = {s}
        dfs(s)
    return out


def score_path(path: ReasoningPath, gate_of, penalty_weight: float) -> float:
    """Sum of node gate values minus a depth-indexed penalty per hop; the
    j-th hop costs penalty_weight * j.  Stores and returns the score."""
    total = sum(gate_of[n] for n in path.nodes)
    hops = len(path.relations)
    total -= penalty_weight * (hops * (hops + 1) / 2.0)
    path.score = float(total)
    return path.score


def select_paths(paths, max_keep: int) -> list[ReasoningPath]:
    """Descending score; ties prefer shorter paths, then lexicographic
    node ids; truncated to max_keep."""
    if max_keep < 1:
        raise ConfigError(f"max_keep must be >= 1, got {max_keep}")
    ordered = sorted(paths, key=lambda p: (-p.score, len(p.nodes), p.nodes))
    return ordered[:max_keep]


# ----------------------------------------------------------------------
# entity weights and document ranking
# ----------------------------------------------------------------------


def entity_weights(
    selection: SubgraphSelection, index: EntityDocIndex, paths, kg: KnowledgeGraph
) -> np.ndarray:
    """w_e = S_e * (1 / #chunks mentioning e) * #paths containing e, over the
    selected entities; zero chunk count or zero path count zeroes the weight.
    If every weight is zero, falls back to the raw gates on the selection."""
    weights = np.zeros(kg.num_entities)
    path_count: dict[int, int] = {}
    for p in paths:
        for n in p.nodes:
            path_count[n] = path_count.get(n, 0) + 1
    for pos in selection.positions:
        eid = kg.ent_ids[pos]
        dc = index.doc_count(pos)
        pc = path_count.get(eid, 0)
        if dc > 0 and pc > 0:
            weights[pos] = selection.gates[pos] * (1.0 / dc) * pc
    if not np.any(weights > 0):
        for pos in selection.positions:
            weights[pos] = selection.gates[pos]
    return weights


def rank_documents(weights: np.ndarray, index: EntityDocIndex, top_k: int) -> list[RankedDoc]:
    """R_c = sum_e M[e,c] w_e computed over the sparse rows; descending
    score with ascending doc_id tiebreak; zero-score chunks excluded."""
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    scores: dict[int, float] = {}
    for pos in np.flatnonzero(weights > 0):
        w = weights[pos]
        for c in index.rows[pos]:
            scores[c] = scores.get(c, 0.0) + w
    ranked = sorted(
        ((index.doc_ids[c], s) for c, s in scores.items() if s > 0),
        key=lambda kv: (-kv[1], kv[0]),
    )
    return [RankedDoc(doc_id, score) for doc_id, score in ranked[:top_k]]


# ----------------------------------------------------------------------
# prompt construction
# ----------------------------------------------------------------------


def build_prompt(
    docs, paths, query_text: str, entity_names, relation_names, entity_domains
) -> str:
    """Byte-exact render: system line, one Document block per ranked doc,
    one Reasoning Path block per selected path, then the question."""
    parts = [SYSTEM_LINE, "\n"]
    for doc, title, content in docs:
        parts.append(f"Document: {title}\n{content}\n")
    for pid, path in enumerate(paths, start=1):
        parts.append(f"Reasoning Path {pid} (score: {path.score:.4f}):\n")
        for i, node in enumerate(path.nodes):
            parts.append(
                f"    Entity {entity_names[node]} (type: domain_{entity_domains[node]}):\n"
            )
            if i < len(path.relations):
                parts.append(f"        --- (relation: {relation_names[path.relations[i]]}) --->\n")
    parts.append(f"Question: {query_text}\n")
    return "".join(parts)


# ----------------------------------------------------------------------
# full pipeline
# ----------------------------------------------------------------------


def find_mentions(kg: KnowledgeGraph, query_text: str) -> set:
    """Entities whose lowercased name appears verbatim (token-aligned) in
    the query text."""
    q_tokens = tokenize(query_text)
    mentioned = set()
    for eid, name in zip(kg.ent_ids, kg.ent_names):
        toks = tokenize(name)
        if not toks or len(toks) > len(q_tokens):
            continue
        for i in range(len(q_tokens) - len(toks) + 1):
            if q_tokens[i : i + len(toks)] == toks:
                mentioned.add(eid)
                break
    return mentioned


@dataclass
class RetrievalModels:
    cache: GraphCache
    corpus: Corpus
    index: EntityDocIndex
    retriever: RetrieverParams
    selector: SelectorParams


def selection_for_query(
    models: RetrievalModels, query_text: str, config: InferenceConfig, mentioned=None
) -> SubgraphSelection:
    """Frozen forward, deterministic gates, thresholded subgraph."""
    kg = models.cache.kg
    if mentioned is None:
        mentioned = find_mentions(kg, query_text)
    ctx = QueryContext(models.cache.provider.embed(query_text), frozenset(mentioned))
    with ad.no_grad():
        _, z_star = forward(models.cache, models.retriever, ctx)
        zt = query_conditioned_embedding(Tensor(z_star.data), models.selector, ctx.q)
        gates = gate_probabilities(
            zt, models.selector, config.tau_gumbel, None, "deterministic", config.gate
        )
    return induce_subgraph(kg, gates.data, config.epsilon)


def retrieve(
    models: RetrievalModels,
    query_text: str,
    config: InferenceConfig,
    mentioned=None,
) -> PromptBundle:
    """Deterministic pipeline from query text to a PromptBundle."""
    kg = models.cache.kg
    chunk_lookup = {c.doc_id: c for c in models.corpus.chunks}
    if kg.num_entities == 0:
        prompt = build_prompt([], [], query_text, {}, {}, {})
        return PromptBundle(prompt, [], [], query_text, empty_graph=True)

    if mentioned is None:
        mentioned = find_mentions(kg, query_text)
    selection = selection_for_query(models, query_text, config, mentioned)

    start = sorted(set(mentioned) & set(selection.entity_ids))
    if not start:
        order = sorted(
            range(kg.num_entities), key=lambda pos: (-selection.gates[pos], kg.ent_ids[pos])
        )
        start = [kg.ent_ids[pos] for pos in order[: config.fallback_starts]]

    paths = extract_paths(selection, start, config.dfs_depth, config.max_paths)
    gate_of = {kg.ent_ids[pos]: float(selection.gates[pos]) for pos in range(kg.num_entities)}
    for p in paths:
        score_path(p, gate_of, config.path_penalty)

    weights = entity_weights(selection, models.index, paths, kg)
    docs = rank_documents(weights, models.index, config.top_k)
    top_paths = select_paths(paths, config.max_keep) if paths else []

    names = dict(zip(kg.ent_ids, kg.ent_names))
    rels = dict(zip(kg.rel_ids, kg.rel_names))
    domains = dict(zip(kg.ent_ids, kg.ent_domains))
    doc_rows = [
        (d, chunk_lookup[d.doc_id].title, chunk_lookup[d.doc_id].content) for d in docs
    ]
    prompt = build_prompt(doc_rows, top_paths, query_text, names, rels, domains)
    return PromptBundle(prompt, docs, top_paths, query_text, empty_graph=False)
