"""Path extraction, document ranking, prompt rendering, full pipeline."""

import json
from pathlib import Path

import numpy as np
import pytest

from graphret.errors import ConfigError, ValidationError
from graphret.harness import brute_force_paths
from graphret.inference import (
    InferenceConfig,
    PromptBundle,
    RankedDoc,
    ReasoningPath,
    RetrievalModels,
    build_prompt,
    entity_weights,
    extract_paths,
    find_mentions,
    rank_documents,
    retrieve,
    score_path,
    select_paths,
)
from graphret.kg import (
    Chunk,
    Corpus,
    EmbeddingProvider,
    KnowledgeGraph,
    build_entity_doc_index,
)
from graphret.numerics import SeededRng
from graphret.retriever import GraphCache, init_retriever_params
from graphret.selector import SubgraphSelection, induce_subgraph, init_selector_params

GOLDEN = Path(__file__).parent / "data" / "golden_prompt.txt"


def selection_over(kg, gates=None, epsilon=0.5):
    if gates is None:
        gates = np.full(kg.num_entities, 0.9)
    return induce_subgraph(kg, np.asarray(gates, dtype=np.float64), epsilon)


def path_is_valid(path, triples):
    tset = set(triples)
    for i, r in enumerate(path.relations):
        a, b = path.nodes[i], path.nodes[i + 1]
        if (a, r, b) not in tset and (b, r, a) not in tset:
            return False
    return len(set(path.nodes)) == len(path.nodes)


class TestExtractPaths:
    def test_empty_selection(self):
        kg = KnowledgeGraph([(0, "a", 0), (1, "b", 0)], [(0, "r")], [(0, 0, 1)])
        sel = selection_over(kg, gates=[0.1, 0.1])
        assert extract_paths(sel, [0], 3) == []

    def test_chain_two_hops(self):
        kg = KnowledgeGraph(
            [(0, "a", 0), (1, "b", 0), (2, "c", 0)],
            [(1, "r1"), (2, "r2")],
            [(0, 1, 1), (1, 2, 2)],
        )
        sel = selection_over(kg)
        paths = extract_paths(sel, [0], 2)
        assert [(p.nodes, p.relations) for p in paths] == [
            ((0, 1), (1,)),
            ((0, 1, 2), (1, 2)),
        ]

    def test_triangle_matches_brute_force(self):
        kg = KnowledgeGraph(
            [(0, "a", 0), (1, "b", 0), (2, "c", 0)],
            [(0, "r")],
            [(0, 0, 1), (1, 0, 2), (2, 0, 0)],
        )
        sel = selection_over(kg)
        got = {(p.nodes, p.relations) for p in extract_paths(sel, [0], 2, max_paths=None)}
        expected = brute_force_paths(kg.triples, [0], 2)
        assert got == expected

    def test_k4_path_count(self):
        # complete graph on 4 nodes: 3 + 3*2 + 3*2*1 = 15 simple paths from one node
        triples = []
        rid = 0
        for i in range(4):
            for j in range(i + 1, 4):
                triples.append((i, 0, j))
        kg = KnowledgeGraph([(i, f"n{i}", 0) for i in range(4)], [(0, "r")], triples)
        sel = selection_over(kg, gates=[0.9] * 4)
        paths = extract_paths(sel, [0], 3, max_paths=None)
        assert len(paths) == 15

    def test_cap_stops_enumeration(self):
        triples = [(i, 0, j) for i in range(4) for j in range(i + 1, 4)]
        kg = KnowledgeGraph([(i, f"n{i}", 0) for i in range(4)], [(0, "r")], triples)
        sel = selection_over(kg, gates=[0.9] * 4)
        paths = extract_paths(sel, [0], 3, max_paths=7)
        assert len(paths) == 7
        full = extract_paths(sel, [0], 3, max_paths=None)
        assert [(p.nodes, p.relations) for p in full[:7]] == [
            (p.nodes, p.relations) for p in paths
        ]

    def test_forward_and_reverse_edges_do_not_duplicate(self):
        kg = KnowledgeGraph(
            [(0, "a", 0), (1, "b", 0)], [(0, "r")], [(0, 0, 1), (1, 0, 0)]
        )
        sel = selection_over(kg)
        paths = extract_paths(sel, [0], 1, max_paths=None)
        assert [(p.nodes, p.relations) for p in paths] == [((0, 1), (0,))]

    def test_all_paths_valid_on_random_graphs(self):
        rng = SeededRng(4)
        for trial in range(30):
            n = int(rng.integers(4, 10))
            triples = sorted(
                {
                    (int(rng.integers(0, n)), int(rng.integers(0, 2)), int(rng.integers(0, n)))
                    for _ in range(n * 2)
                }
            )
            triples = [(h, r, t) for h, r, t in triples if h != t]
            kg = KnowledgeGraph(
                [(i, f"n{i}", 0) for i in range(n)], [(0, "r"), (1, "s")], triples
            )
            sel = selection_over(kg, gates=[0.9] * n)
            paths = extract_paths(sel, [0, 1], 3, max_paths=None)
            seen = set()
            for p in paths:
                key = (p.nodes, p.relations)
                assert key not in seen
                seen.add(key)
                assert path_is_valid(p, sel.triples)
                assert 1 <= len(p.relations) <= 3

    def test_matches_oracle_on_random_graphs(self):
        rng = SeededRng(9)
        for trial in range(40):
            n = int(rng.integers(3, 9))
            triples = sorted(
                {
                    (int(rng.integers(0, n)), int(rng.integers(0, 2)), int(rng.integers(0, n)))
                    for _ in range(n + 4)
                }
            )
            triples = [(h, r, t) for h, r, t in triples if h != t]
            kg = KnowledgeGraph(
                [(i, f"n{i}", 0) for i in range(n)], [(0, "r"), (1, "s")], triples
            )
            sel = selection_over(kg, gates=[0.9] * n)
            starts = [0, n - 1]
            for budget in (1, 2, 3):
                got = {
                    (p.nodes, p.relations)
                    for p in extract_paths(sel, starts, budget, max_paths=None)
                }
                assert got == brute_force_paths(kg.triples, starts, budget)


class TestScorePath:
    def test_single_hop(self):
        p = ReasoningPath((0, 1), (0,))
        got = score_path(p, {0: 0.9, 1: 0.8}, 0.1)
        assert abs(got - 1.6) < 1e-12
        assert p.score == got

    def test_two_hop(self):
        p = ReasoningPath((0, 1, 2), (0, 1))
        assert abs(score_path(p, {0: 0.9, 1: 0.8, 2: 0.7}, 0.1) - 2.1) < 1e-12

    def test_zero_penalty(self):
        p = ReasoningPath((0, 1, 2), (0, 1))
        assert abs(score_path(p, {0: 0.5, 1: 0.5, 2: 0.5}, 0.0) - 1.5) < 1e-12

    def test_depth_indexed_additivity(self):
        # concatenating p1=(a,b) and p2=(b,c) re-indexes p2's hop from depth 1
        # to depth 2; verify against the explicit per-depth formula
        gates = {0: 0.9, 1: 0.8, 2: 0.7}
        lam = 0.1
        joint = score_path(ReasoningPath((0, 1, 2), (5, 6)), gates, lam)
        p1 = score_path(ReasoningPath((0, 1), (5,)), gates, lam)
        p2 = score_path(ReasoningPath((1, 2), (6,)), gates, lam)
        correction = gates[1] + lam * 1  # shared node counted twice; hop 2 deepens by 1
        assert abs(joint - (p1 + p2 - correction)) < 1e-12


class TestSelectPaths:
    def _scored(self, nodes, rels, score):
        p = ReasoningPath(tuple(nodes), tuple(rels))
        p.score = score
        return p

    def test_single_path(self):
        p = self._scored([0, 1], [0], 1.0)
        assert select_paths([p], 5) == [p]

    def test_tie_prefers_shorter(self):
        long = self._scored([0, 1, 2], [0, 0], 1.0)
        short = self._scored([3, 4], [0], 1.0)
        assert select_paths([long, short], 2) == [short, long]

    def test_matches_sort_oracle(self):
        rng = SeededRng(3)
        paths = []
        for i in range(10):
            k = int(rng.integers(1, 4))
            nodes = tuple(int(x) for x in rng.choice_without_replacement(list(range(20)), k + 1))
            p = ReasoningPath(nodes, tuple([0] * k))
            p.score = round(float(rng.random()), 1)
            paths.append(p)
        got = select_paths(paths, 4)
        expected = sorted(paths, key=lambda p: (-p.score, len(p.nodes), p.nodes))[:4]
        assert got == expected


def weight_fixture():
    kg = KnowledgeGraph(
        [(0, "alpha", 0), (1, "beta", 1), (2, "gamma", 0)],
        [(0, "links"), (1, "feeds")],
        [(0, 0, 1), (1, 1, 2)],
    )
    corpus = Corpus(
        (
            Chunk("d0", "Alpha and friends", "alpha links beta which links gamma.", (0, 1, 2)),
            Chunk("d1", "Alpha note", "alpha appears here.", (0,)),
            Chunk("d2", "Beta note", "beta appears here.", (1,)),
        )
    )
    index = build_entity_doc_index(kg, corpus)
    return kg, corpus, index


class TestEntityWeights:
    def test_hand_value(self):
        kg, corpus, index = weight_fixture()
        sel = selection_over(kg, gates=[0.5, 0.5, 0.5], epsilon=0.4)
        # entity 0 sits in 2 chunks; give it 3 paths -> 0.5 * (1/2) * 3
        paths = [
            ReasoningPath((0, 1), (0,)),
            ReasoningPath((0, 1, 2), (0, 1)),
            ReasoningPath((1, 0), (0,)),
        ]
        w = entity_weights(sel, index, paths, kg)
        assert abs(w[0] - 0.75) < 1e-12

    def test_entity_in_no_document(self):
        kg = KnowledgeGraph([(0, "a", 0), (1, "b", 0)], [(0, "r")], [(0, 0, 1)])
        corpus = Corpus((Chunk("d0", "t", "c", (1,)),))
        index = build_entity_doc_index(kg, corpus)
        sel = selection_over(kg, gates=[0.9, 0.9])
        paths = [ReasoningPath((0, 1), (0,))]
        w = entity_weights(sel, index, paths, kg)
        assert w[0] == 0.0 and w[1] > 0

    def test_pathless_fallback_to_gates(self):
        kg, corpus, index = weight_fixture()
        sel = selection_over(kg, gates=[0.6, 0.7, 0.8])
        w = entity_weights(sel, index, [], kg)
        np.testing.assert_array_equal(w, [0.6, 0.7, 0.8])

    def test_fallback_restricted_to_selection(self):
        kg, corpus, index = weight_fixture()
        sel = selection_over(kg, gates=[0.6, 0.3, 0.8])
        w = entity_weights(sel, index, [], kg)
        np.testing.assert_array_equal(w, [0.6, 0.0, 0.8])


class TestRankDocuments:
    def test_single_weighted_entity(self):
        kg, corpus, index = weight_fixture()
        w = np.array([0.75, 0.0, 0.0])
        docs = rank_documents(w, index, 5)
        assert [(d.doc_id, d.score) for d in docs] == [("d0", 0.75), ("d1", 0.75)]

    def test_tiebreak_ascending_doc_id(self):
        kg = KnowledgeGraph([(0, "a", 0)], [(0, "r")], [])
        corpus = Corpus((Chunk("zz", "t", "c", (0,)), Chunk("aa", "t", "c", (0,))))
        index = build_entity_doc_index(kg, corpus)
        docs = rank_documents(np.array([1.0]), index, 5)
        assert [d.doc_id for d in docs] == ["aa", "zz"]

    def test_zero_scores_excluded_and_k_respected(self):
        kg, corpus, index = weight_fixture()
        docs = rank_documents(np.zeros(3), index, 5)
        assert docs == []
        docs = rank_documents(np.array([0.5, 0.4, 0.0]), index, 1)
        assert len(docs) == 1

    def test_matches_dense_product(self):
        rng = SeededRng(8)
        n, m = 12, 10
        kg = KnowledgeGraph([(i, f"e{i}", 0) for i in range(n)], [(0, "r")], [])
        chunks = []
        dense = np.zeros((n, m))
        for c in range(m):
            ents = rng.choice_without_replacement(list(range(n)), 3)
            for e in ents:
                dense[e, c] = 1.0
            chunks.append(Chunk(f"d{c:02d}", "t", "c", tuple(sorted(ents))))
        index = build_entity_doc_index(kg, Corpus(tuple(chunks)))
        for _ in range(20):
            w = rng.uniform(n)
            w[w < 0.3] = 0.0
            got = rank_documents(w, index, m)
            r = dense.T @ w
            expected = sorted(
                ((f"d{c:02d}", r[c]) for c in range(m) if r[c] > 0),
                key=lambda kv: (-kv[1], kv[0]),
            )
            assert [(d.doc_id, d.score) for d in got] == [
                (d, pytest.approx(s, abs=1e-12)) for d, s in expected
            ]


class TestBuildPrompt:
    def test_degenerate_render(self):
        out = build_prompt([], [], "what is this", {}, {}, {})
        assert out == (
            "As an advanced reading comprehension assistant, your task is to "
            "analyze text passages and corresponding questions meticulously. "
            "Your responses start after ...\nQuestion: what is this\n"
        )

    def test_golden_fixture_byte_exact(self):
        kg, corpus, index = weight_fixture()
        path = ReasoningPath((0, 1, 2), (0, 1))
        score_path(path, {0: 0.9, 1: 0.8, 2: 0.7}, 0.1)
        doc = RankedDoc("d0", 0.75)
        out = build_prompt(
            [(doc, corpus.chunks[0].title, corpus.chunks[0].content)],
            [path],
            "what connects alpha to gamma",
            dict(zip(kg.ent_ids, kg.ent_names)),
            dict(zip(kg.rel_ids, kg.rel_names)),
            dict(zip(kg.ent_ids, kg.ent_domains)),
        )
        assert out.encode("utf-8") == GOLDEN.read_bytes()

    def test_same_inputs_identical_bytes(self):
        kg, corpus, index = weight_fixture()
        path = ReasoningPath((0, 1), (0,))
        path.score = 1.25
        args = (
            [(RankedDoc("d1", 0.5), "Alpha note", "alpha appears here.")],
            [path],
            "q",
            dict(zip(kg.ent_ids, kg.ent_names)),
            dict(zip(kg.rel_ids, kg.rel_names)),
            dict(zip(kg.ent_ids, kg.ent_domains)),
        )
        assert build_prompt(*args) == build_prompt(*args)


class TestFindMentions:
    def test_token_aligned_match(self):
        kg = KnowledgeGraph(
            [(0, "new york", 0), (1, "york", 0), (2, "newark", 0)], [(0, "r")], []
        )
        got = find_mentions(kg, "Flights from New York tonight")
        assert got == {0, 1}  # "york" is a token-aligned sub-name; "newark" is not

    def test_no_partial_token_match(self):
        kg = KnowledgeGraph([(0, "e1", 0), (1, "e12", 0)], [(0, "r")], [])
        assert find_mentions(kg, "tell me about e12") == {1}


def pipeline_fixture(seed=0):
    kg, corpus, index = weight_fixture()
    provider = EmbeddingProvider(8)
    cache = GraphCache(kg, provider)
    retr = init_retriever_params(SeededRng(seed), 8, 4, 2)
    sel = init_selector_params(SeededRng(seed + 1), 8, 4, 4, 4)
    return RetrievalModels(cache, corpus, index, retr, sel)


class TestRetrieve:
    def test_untrained_models_give_wellformed_bundle(self):
        models = pipeline_fixture()
        bundle = retrieve(models, "nothing matches here", InferenceConfig())
        assert bundle.prompt_text.startswith("As an advanced reading")
        assert bundle.prompt_text.endswith("Question: nothing matches here\n")
        assert not bundle.empty_graph

    def test_repeated_invocation_identical(self):
        models = pipeline_fixture()
        cfg = InferenceConfig()
        a = retrieve(models, "alpha links", cfg)
        b = retrieve(models, "alpha links", cfg)
        assert a.prompt_text == b.prompt_text
        assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)

    def test_empty_graph_warning(self):
        kg = KnowledgeGraph([], [], [])
        corpus = Corpus(())
        index = build_entity_doc_index(kg, corpus)
        provider = EmbeddingProvider(8)
        cache = GraphCache(kg, provider)
        retr = init_retriever_params(SeededRng(0), 8, 4, 1)
        sel = init_selector_params(SeededRng(1), 8, 4, 4, 4)
        bundle = retrieve(RetrievalModels(cache, corpus, index, retr, sel), "hi", InferenceConfig())
        assert bundle.empty_graph
        assert bundle.docs == [] and bundle.paths == []

    def test_json_roundtrip_lossless(self):
        models = pipeline_fixture()
        bundle = retrieve(models, "alpha links beta", InferenceConfig())
        blob = json.dumps(bundle.to_json())
        back = PromptBundle.from_json(json.loads(blob))
        assert back.prompt_text == bundle.prompt_text
        assert back.query_text == bundle.query_text
        assert [(d.doc_id, d.score) for d in back.docs] == [
            (d.doc_id, d.score) for d in bundle.docs
        ]
        assert [(p.nodes, p.relations, p.score) for p in back.paths] == [
            (p.nodes, p.relations, p.score) for p in bundle.paths
        ]

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            InferenceConfig(top_k=0)
        with pytest.raises(ConfigError):
            InferenceConfig(epsilon=1.0)


class TestReasoningPathInvariants:
    def test_rejects_node_repeat(self):
        with pytest.raises(ValidationError):
            ReasoningPath((0, 1, 0), (0, 0))

    def test_rejects_relation_count_mismatch(self):
        with pytest.raises(ValidationError):
            ReasoningPath((0, 1), (0, 1))
        with pytest.raises(ValidationError):
            ReasoningPath((0,), ())
