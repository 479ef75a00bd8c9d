"""Synthetic benchmarks, retrieval metrics, and independent oracles.

The synthetic generator plants simple paths in a random multi-domain
graph and authors one gold chunk per planted query; query text
concatenates the start entity's name with the path's relation names so
token-hash embeddings carry usable signal at desk scale.

The oracles here are deliberately naive reference implementations:
exhaustive path enumeration, exact discrete information quantities, and
a random-scoring baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, GenerationError, NumericError, ValidationError
from .kg import Chunk, Corpus, KnowledgeGraph, LabeledQuery
from .numerics import SeededRng
from .retriever import GraphCache, QueryContext, RetrieverParams, forward


@dataclass
class SyntheticSpec:
    num_domains: int = 3
    entities_per_domain: int = 200
    relations: int = 8
    intra_domain_triples: int = 1600
    cross_domain_triples: int = 400
    num_queries: int = 100
    query_hops: tuple = (1, 2, 3)
    chunks_per_entity: int = 1
    seed: int = 1024

    def __post_init__(self):
        for name in (
            "num_domains",
            "entities_per_domain",
            "relations",
            "intra_domain_triples",
            "cross_domain_triples",
            "num_queries",
            "chunks_per_entity",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.query_hops or any(h < 1 or h > 3 for h in self.query_hops):
            raise ConfigError(f"query_hops must be a nonempty subset of {{1,2,3}}, got {self.query_hops}")


def generate_synthetic(spec: SyntheticSpec):
    """Deterministic (KnowledgeGraph, Corpus, queries) for a spec."""
    rng = SeededRng(spec.seed).substream("synth")
    n = spec.num_domains * spec.entities_per_domain
    entities = []
    for d in range(spec.num_domains):
        for i in range(spec.entities_per_domain):
            eid = d * spec.entities_per_domain + i
            entities.append((eid, f"e{d}x{i}", d))
    relations = [(r, f"rel{r}") for r in range(spec.relations)]

    triples = set()
    attempts = 0
    while len(triples) < spec.intra_domain_triples:
        attempts += 1
        if attempts > 100 * spec.intra_domain_triples:
            raise GenerationError("could not place the requested intra-domain triples")
        d = int(rng.integers(0, spec.num_domains))
        base = d * spec.entities_per_domain
        h = base + int(rng.integers(0, spec.entities_per_domain))
        t = base + int(rng.integers(0, spec.entities_per_domain))
        if h == t:
            continue
        triples.add((h, int(rng.integers(0, spec.relations)), t))
    target = spec.intra_domain_triples + spec.cross_domain_triples
    attempts = 0
    while len(triples) < target:
        attempts += 1
        if attempts > 100 * spec.cross_domain_triples:
            raise GenerationError("could not place the requested cross-domain triples")
        d1 = int(rng.integers(0, spec.num_domains))
        d2 = int(rng.integers(0, spec.num_domains))
        if d1 == d2:
            continue
        h = d1 * spec.entities_per_domain + int(rng.integers(0, spec.entities_per_domain))
        t = d2 * spec.entities_per_domain + int(rng.integers(0, spec.entities_per_domain))
        triples.add((h, int(rng.integers(0, spec.relations)), t))

    kg = KnowledgeGraph(entities, relations, sorted(triples))

    out_edges: dict[int, list] = {}
    for h, r, t in kg.triples:
        out_edges.setdefault(h, []).append((r, t))
    for outs in out_edges.values():
        outs.sort()

    def sample_path(hops: int):
        for _ in range(200):
            start = int(rng.integers(0, n))
            nodes = [start]
            rels = []
            ok = True
            for _ in range(hops):
                outs = [(r, t) for r, t in out_edges.get(nodes[-1], []) if t not in nodes]
                if not outs:
                    ok = False
                    break
                r, t = outs[int(rng.integers(0, len(outs)))]
                nodes.append(t)
                rels.append(r)
            if ok:
                return nodes, rels
        raise GenerationError(f"no simple path of {hops} hops found; graph too sparse")

    rel_names = dict(relations)
    name_of = {eid: name for eid, name, _ in entities}
    queries = []
    gold_chunks = []
    for qi in range(spec.num_queries):
        hops = spec.query_hops[int(rng.integers(0, len(spec.query_hops)))]
        nodes, rels = sample_path(hops)
        text = " ".join([name_of[nodes[0]]] + [rel_names[r] for r in rels])
        doc_id = f"gold{qi:04d}"
        gold_chunks.append(
            Chunk(
                doc_id,
                f"About {name_of[nodes[0]]}",
                " ".join(name_of[e] for e in nodes),
                tuple(nodes),
            )
        )
        queries.append(
            LabeledQuery(
                text=text,
                mentioned=(nodes[0],),
                positives=tuple(nodes),
                gold_docs=(doc_id,),
                hops=hops,
            )
        )

    chunks = []
    for eid, name, _ in entities:
        for j in range(spec.chunks_per_entity):
            chunks.append(Chunk(f"e{eid:05d}c{j}", f"Note on {name}", f"{name} appears here.", (eid,)))
    corpus = Corpus(tuple(chunks + gold_chunks))
    return kg, corpus, queries


def validate_planted_queries(kg: KnowledgeGraph, queries) -> int:
    """Check every planted path exists edge-by-edge in the graph; returns
    the number of violations."""
    triple_set = set(kg.triples)
    bad = 0
    for q in queries:
        nodes = list(q.positives)
        if len(nodes) != q.hops + 1:
            bad += 1
            continue
        # positives are stored in path order
        ok = all(
            any((nodes[i], r, nodes[i + 1]) in triple_set for r in kg.rel_ids)
            for i in range(len(nodes) - 1)
        )
        bad += 0 if ok else 1
    return bad


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------


def recall_at_k(ranked, gold, k: int) -> float:
    """|top-k intersect gold| / |gold|; empty gold counts as 1.0."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    gold = set(gold)
    if not gold:
        return 1.0
    return len(set(ranked[:k]) & gold) / len(gold)


def mrr(ranked_lists, gold_sets) -> float:
    """Mean over queries of 1/rank of the first gold item (0 if absent)."""
    if len(ranked_lists) != len(gold_sets):
        raise ValidationError("mrr needs one gold set per ranking")
    if not ranked_lists:
        return 0.0
    total = 0.0
    for ranked, gold in zip(ranked_lists, gold_sets):
        gold = set(gold)
        for i, item in enumerate(ranked, start=1):
            if item in gold:
                total += 1.0 / i
                break
    return total / len(ranked_lists)


@dataclass
class MetricsReport:
    recall_e: dict
    recall_d: dict
    mrr: float
    queries: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "recall_e": {str(k): v for k, v in self.recall_e.items()},
            "recall_d": {str(k): v for k, v in self.recall_d.items()},
            "mrr": self.mrr,
            "queries": self.queries,
        }


def build_report(entity_rankings, doc_rankings, queries, k_values=(2, 5)) -> MetricsReport:
    gold_entities = [q.positives for q in queries]
    gold_docs = [q.gold_docs for q in queries]
    recall_e = {
        k: float(np.mean([recall_at_k(r, g, k) for r, g in zip(entity_rankings, gold_entities)]))
        if queries
        else 0.0
        for k in k_values
    }
    recall_d = {
        k: float(np.mean([recall_at_k(r, g, k) for r, g in zip(doc_rankings, gold_docs)]))
        if queries
        else 0.0
        for k in k_values
    }
    rows = [
        {
            "text": q.text,
            "recall_e_5": recall_at_k(er, q.positives, 5),
            "recall_d_5": recall_at_k(dr, q.gold_docs, 5),
        }
        for q, er, dr in zip(queries, entity_rankings, doc_rankings)
    ]
    return MetricsReport(recall_e, recall_d, mrr(entity_rankings, gold_entities), rows)


# ----------------------------------------------------------------------
# oracles
# ----------------------------------------------------------------------


def brute_force_paths(edges, start, hop_budget: int):
    """Exhaustive recursion over an explicit edge list; both directions;
    returns the set of (nodes, relations) tuples.  Guard-railed to small
    graphs; intentionally naive."""
    nodes = {h for h, _, _ in edges} | {t for _, _, t in edges} | set(start)
    if len(nodes) > 12:
        raise ValidationError(f"brute_force_paths is limited to 12 nodes, got {len(nodes)}")
    results = set()

    def recurse(path_nodes, path_rels):
        if len(path_rels) >= 1:
            results.add((tuple(path_nodes), tuple(path_rels)))
        if len(path_rels) >= hop_budget:
            return
        here = path_nodes[-1]
        for h, r, t in edges:
            if h == here and t not in path_nodes:
                recurse(path_nodes + [t], path_rels + [r])
            if t == here and h not in path_nodes:
                recurse(path_nodes + [h], path_rels + [r])

    for s in sorted(set(start)):
        recurse([s], [])
    return results


def _entropy(p: np.ndarray) -> float:
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(p[mask])))


def mi_inequality_oracle(joint: np.ndarray, markov: bool = True):
    """Exact I(y;G), I(q;G), H(q|y) for a 3-d pmf over (y, q, G), plus the
    flag |I(y;G) - I(q;G)| <= H(q|y) + 1e-9."""
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 3:
        raise ValidationError(f"expected a 3-d table, got shape {joint.shape}")
    if np.any(joint < 0) or abs(joint.sum() - 1.0) > 1e-9:
        raise ValidationError("joint table must be a pmf (nonnegative, sums to 1)")
    p_y = joint.sum(axis=(1, 2))
    p_q = joint.sum(axis=(0, 2))
    p_g = joint.sum(axis=(0, 1))
    p_yg = joint.sum(axis=1)
    p_qg = joint.sum(axis=0)
    p_yq = joint.sum(axis=2)

    def mi(p_xy, p_x, p_yv):
        return _entropy(p_x) + _entropy(p_yv) - _entropy(p_xy.reshape(-1))

    i_yg = mi(p_yg, p_y, p_g)
    i_qg = mi(p_qg, p_q, p_g)
    h_q_given_y = _entropy(p_yq.reshape(-1)) - _entropy(p_y)
    holds = abs(i_yg - i_qg) <= h_q_given_y + 1e-9
    return i_yg, i_qg, h_q_given_y, holds


def random_markov_table(rng: SeededRng, shape=(3, 3, 3)) -> np.ndarray:
    """p(y) p(q|y) p(G|q): the Markov chain y -> q -> G as a joint table."""
    ny, nq, ng = shape
    p_y = rng.uniform(ny) + 1e-3
    p_y /= p_y.sum()
    p_q_given_y = rng.uniform((ny, nq)) + 1e-3
    p_q_given_y /= p_q_given_y.sum(axis=1, keepdims=True)
    p_g_given_q = rng.uniform((nq, ng)) + 1e-3
    p_g_given_q /= p_g_given_q.sum(axis=1, keepdims=True)
    joint = p_y[:, None, None] * p_q_given_y[:, :, None] * p_g_given_q[None, :, :]
    return joint


# ----------------------------------------------------------------------
# baselines and model evaluation
# ----------------------------------------------------------------------


def random_baseline(kg: KnowledgeGraph, corpus_doc_ids, queries, rng: SeededRng, k_values=(2, 5)) -> MetricsReport:
    """Entities and documents ranked by fresh uniform scores per query."""
    entity_rankings = []
    doc_rankings = []
    for _ in queries:
        e_scores = rng.uniform(kg.num_entities)
        order = np.argsort(-e_scores, kind="stable")
        entity_rankings.append([kg.ent_ids[i] for i in order])
        d_scores = rng.uniform(len(corpus_doc_ids))
        dorder = np.argsort(-d_scores, kind="stable")
        doc_rankings.append([corpus_doc_ids[i] for i in dorder])
    return build_report(entity_rankings, doc_rankings, queries, k_values)


def rank_entities_by_scores(kg: KnowledgeGraph, scores: np.ndarray) -> list:
    order = sorted(range(kg.num_entities), key=lambda pos: (-scores[pos], kg.ent_ids[pos]))
    return [kg.ent_ids[pos] for pos in order]


def evaluate_retriever(cache: GraphCache, params: RetrieverParams, queries, k_values=(2, 5)) -> MetricsReport:
    """Entity metrics for the bare retriever (documents left unranked)."""
    entity_rankings = []
    doc_rankings = []
    for q in queries:
        ctx = QueryContext(cache.provider.embed(q.text), frozenset(q.mentioned))
        with ad.no_grad():
            scores, _ = forward(cache, params, ctx)
        entity_rankings.append(rank_entities_by_scores(cache.kg, scores.data))
        doc_rankings.append([])
    return build_report(entity_rankings, doc_rankings, queries, k_values)
