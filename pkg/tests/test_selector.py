"""Subgraph selector: gates, pooling, contrastive and penalty losses."""

import math

import numpy as np
import pytest

from graphret import autodiff as ad
from graphret.autodiff import Parameter, Tensor, grad_check
from graphret.errors import ConfigError, NumericError
from graphret.kg import (
    EmbeddingProvider,
    KnowledgeGraph,
    LabeledQuery,
    normalized_laplacian,
)
from graphret.numerics import SeededRng
from graphret.retriever import GraphCache, init_retriever_params
from graphret.selector import (
    FinetuneConfig,
    SelectorParams,
    finetune,
    finetune_step,
    gate_probabilities,
    induce_subgraph,
    init_selector_params,
    load_selector,
    loss_con,
    loss_nce,
    loss_size,
    pooled_repr,
    query_conditioned_embedding,
    save_selector,
    selector_forward,
)
from graphret.pretrain import make_optimizer


def small_kg():
    entities = [(i, f"ent{i} d{i // 2}", i // 2) for i in range(6)]
    relations = [(0, "near"), (1, "above")]
    triples = [(0, 0, 1), (1, 1, 2), (2, 0, 3), (3, 1, 4), (4, 0, 5), (5, 1, 0), (0, 1, 3)]
    return KnowledgeGraph(entities, relations, triples)


def make_selector(seed=1, text_dim=4, hidden=3, prompt=4, sel=4):
    return init_selector_params(SeededRng(seed), text_dim, hidden, prompt, sel)


def zero_biases_selector(*args, **kwargs):
    s = make_selector(*args, **kwargs)
    return s


class TestQueryConditionedEmbedding:
    def test_zero_query_zero_broadcast(self):
        s = make_selector()
        zstar = Tensor(np.arange(18.0).reshape(6, 3))
        zt = query_conditioned_embedding(zstar, s, np.zeros(4))
        # prompt MLP of 0 with zero biases is 0, so both broadcast blocks vanish
        np.testing.assert_array_equal(zt.data[:, :3], zstar.data)
        np.testing.assert_array_equal(zt.data[:, 3:], np.zeros((6, 6)))

    def test_equal_state_rows_give_equal_rows(self):
        s = make_selector()
        zstar = Tensor(np.ones((4, 3)))
        zt = query_conditioned_embedding(zstar, s, np.array([0.5, -0.2, 0.1, 0.9]))
        for i in range(1, 4):
            np.testing.assert_array_equal(zt.data[0], zt.data[i])

    def test_broadcast_columns_constant(self):
        s = make_selector(seed=3)
        rng = SeededRng(5)
        zstar = Tensor(rng.normal((5, 3)))
        zt = query_conditioned_embedding(zstar, s, rng.normal(4))
        for col in range(3, 9):
            assert np.all(zt.data[:, col] == zt.data[0, col])

    def test_dimension_checked(self):
        s = make_selector()
        from graphret.errors import ShapeError

        with pytest.raises(ShapeError):
            query_conditioned_embedding(Tensor(np.ones((2, 3))), s, np.zeros(7))


class TestGateProbabilities:
    def _fixed_logit_selector(self, logit):
        s = make_selector()
        s.gate_w2.data = np.zeros_like(s.gate_w2.data)
        s.gate_b2.data = np.array([float(logit)])
        return s

    def _zt(self, s, n=4):
        rng = SeededRng(2)
        zstar = Tensor(rng.normal((n, s.hidden_dim)))
        return query_conditioned_embedding(zstar, s, rng.normal(s.text_dim))

    def test_zero_logit_gives_half(self):
        s = self._fixed_logit_selector(0.0)
        gates = gate_probabilities(self._zt(s), s, 0.5, None, "deterministic")
        np.testing.assert_array_equal(gates.data, np.full(4, 0.5))

    def test_logit_two_tau_half(self):
        s = self._fixed_logit_selector(2.0)
        gates = gate_probabilities(self._zt(s), s, 0.5, None, "deterministic")
        np.testing.assert_allclose(gates.data, 0.9820137900379085, atol=1e-15)

    def test_hardening_at_small_tau(self):
        s = make_selector(seed=9)
        zt = self._zt(s, n=16)
        gates = gate_probabilities(zt, s, 1e-3, None, "deterministic")
        from graphret.selector import gate_logits

        logits = gate_logits(zt, s).data
        for g, logit in zip(gates.data, logits):
            if abs(logit) > 0.1:
                assert abs(g - (1.0 if logit > 0 else 0.0)) < 1e-2

    def test_stochastic_reproducible(self):
        s = make_selector(seed=4)
        zt = self._zt(s)
        a = gate_probabilities(zt, s, 0.5, SeededRng(7), "stochastic")
        b = gate_probabilities(zt, s, 0.5, SeededRng(7), "stochastic")
        assert np.array_equal(a.data, b.data)
        c = gate_probabilities(zt, s, 0.5, SeededRng(8), "stochastic")
        assert not np.array_equal(a.data, c.data)

    def test_literal_variant_double_squash(self):
        s = self._fixed_logit_selector(2.0)
        gates = gate_probabilities(self._zt(s), s, 0.5, None, "deterministic", variant="literal")
        inner = 1.0 / (1.0 + math.exp(-2.0))
        expected = 1.0 / (1.0 + math.exp(-inner / 0.5))
        np.testing.assert_allclose(gates.data, expected, atol=1e-15)

    def test_open_interval(self):
        s = self._fixed_logit_selector(9.0)
        gates = gate_probabilities(self._zt(s), s, 0.5, SeededRng(1), "stochastic")
        assert np.all(gates.data > 0) and np.all(gates.data < 1)

    def test_bad_mode(self):
        s = make_selector()
        with pytest.raises(ConfigError):
            gate_probabilities(self._zt(s), s, 0.5, None, "sometimes")


class TestInduceSubgraph:
    def test_all_below_epsilon(self):
        kg = small_kg()
        sel = induce_subgraph(kg, np.full(6, 0.1), 0.5)
        assert len(sel.positions) == 0 and sel.triples == []

    def test_all_above_epsilon(self):
        kg = small_kg()
        sel = induce_subgraph(kg, np.full(6, 0.9), 0.5)
        assert list(sel.positions) == list(range(6))
        assert sel.triples == kg.triples
        assert sel.relation_ids == {0, 1}

    def test_mixed_matches_brute_force(self):
        kg = small_kg()
        rng = SeededRng(6)
        for _ in range(20):
            gates = rng.uniform(6)
            sel = induce_subgraph(kg, gates, 0.5)
            keep = {kg.ent_ids[i] for i in range(6) if gates[i] > 0.5}
            expected = [tr for tr in kg.triples if tr[0] in keep and tr[2] in keep]
            assert sel.triples == expected

    def test_strict_threshold(self):
        kg = small_kg()
        gates = np.full(6, 0.5)
        sel = induce_subgraph(kg, gates, 0.5)
        assert len(sel.positions) == 0  # strictly greater than epsilon


class TestPooledRepr:
    def test_empty_selection_zero(self):
        zt = Tensor(np.ones((3, 5)))
        s = Tensor(np.ones(3))
        out = pooled_repr(zt, s, np.array([], dtype=np.int64))
        np.testing.assert_array_equal(out.data, np.zeros(5))

    def test_single_entity_unit_gate(self):
        zt = Tensor(np.arange(15.0).reshape(3, 5))
        s = Tensor(np.array([0.2, 1.0, 0.3]))
        out = pooled_repr(zt, s, np.array([1]))
        np.testing.assert_array_equal(out.data, zt.data[1])

    def test_two_entity_weighted_sum(self):
        zt = Tensor(np.array([[2.0, 0.0], [0.0, 4.0], [9.0, 9.0]]))
        s = Tensor(np.array([0.5, 0.5, 0.9]))
        out = pooled_repr(zt, s, np.array([0, 1]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_mean_pool_divides_by_gate_mass(self):
        zt = Tensor(np.array([[2.0, 0.0], [0.0, 4.0]]))
        s = Tensor(np.array([0.5, 0.5]))
        out = pooled_repr(zt, s, np.array([0, 1]), pool="mean")
        np.testing.assert_array_equal(out.data, [1.0, 2.0])


class TestLossNce:
    def _pair(self, seed, d=4):
        rng = SeededRng(seed)
        return Tensor(rng.normal(d)), rng.normal(d)

    def test_batch_of_one_is_zero(self):
        assert loss_nce([self._pair(1)], 0.07).item() == 0.0

    def test_equal_similarities_give_log2(self):
        g = Tensor(np.array([1.0, 0.0]))
        q = np.array([1.0, 0.0])
        got = loss_nce([(g, q), (g, q)], 0.07).item()
        assert abs(got - math.log(2.0)) < 1e-12

    def test_nonnegative(self):
        for seed in range(30):
            pairs = [self._pair(seed * 3 + k) for k in range(3)]
            assert loss_nce(pairs, 0.07).item() >= 0.0
            assert loss_nce(pairs, 0.07, variant="cross_pairs").item() >= -1e-12

    def test_empty_batch_rejected(self):
        with pytest.raises(NumericError):
            loss_nce([], 0.07)

    def test_gradient_both_variants(self):
        rng = SeededRng(3)
        gs = [Parameter(rng.normal(3)) for _ in range(3)]
        qs = [rng.normal(3) for _ in range(3)]
        for variant in ("matched", "cross_pairs"):
            err = grad_check(
                lambda: loss_nce(list(zip(gs, qs)), 0.5, variant=variant), gs
            )
            assert err < 1e-5


class TestPenalties:
    def test_size_cases(self):
        assert loss_size(Tensor(np.zeros(4))).item() == 0.0
        assert abs(loss_size(Tensor([0.2, 0.3, 0.5])).item() - 1.0) < 1e-15
        assert loss_size(Tensor(np.ones(7))).item() == 7.0

    def test_con_two_node_graph(self):
        kg = KnowledgeGraph([(0, "a", 0), (1, "b", 0)], [(0, "r")], [(0, 0, 1)])
        lap = normalized_laplacian(kg)
        assert loss_con(Tensor([0.0, 0.0]), lap).item() == 0.0
        assert abs(loss_con(Tensor([1.0, 1.0]), lap).item()) < 1e-15
        assert abs(loss_con(Tensor([1.0, 0.0]), lap).item() - 1.0) < 1e-15

    def test_con_psd_random(self):
        rng = SeededRng(14)
        n = 12
        triples = sorted({(int(rng.integers(0, n)), 0, int(rng.integers(0, n))) for _ in range(25)})
        kg = KnowledgeGraph([(i, f"e{i}", 0) for i in range(n)], [(0, "r")], triples)
        lap = normalized_laplacian(kg)
        for _ in range(1000):
            s = rng.uniform(n)
            assert loss_con(Tensor(s), lap).item() >= -1e-9

    def test_con_null_vector_on_regular_graph(self):
        # 4-cycle: connected and 2-regular
        kg = KnowledgeGraph(
            [(i, f"e{i}", 0) for i in range(4)],
            [(0, "r")],
            [(0, 0, 1), (1, 0, 2), (2, 0, 3), (3, 0, 0)],
        )
        lap = normalized_laplacian(kg)
        s = np.sqrt(2.0) * np.ones(4) * 0.37
        assert abs(loss_con(Tensor(s), lap).item()) < 1e-9

    def test_gradients(self):
        kg = small_kg()
        lap = normalized_laplacian(kg)
        s = Parameter(SeededRng(2).uniform(6))
        assert grad_check(lambda: loss_con(s, lap), [s]) < 1e-6
        assert grad_check(lambda: loss_size(s), [s]) < 1e-6


def build_finetune_fixture(seed=0):
    kg = small_kg()
    provider = EmbeddingProvider(4)
    cache = GraphCache(kg, provider)
    frozen = init_retriever_params(SeededRng(seed), 4, 3, 2)
    queries = [
        LabeledQuery("ent0 d0 near", (0,), (0, 1), ("doc0",), 1),
        LabeledQuery("ent2 d1 above", (2,), (2, 3, 4), ("doc1",), 2),
        LabeledQuery("ent5 d2 above", (5,), (5, 0), ("doc2",), 1),
    ]
    return kg, cache, frozen, queries


class TestFinetuneStep:
    def test_zero_betas_batch_of_one_equals_retrieval(self):
        kg, cache, frozen, queries = build_finetune_fixture()
        config = FinetuneConfig(beta1=0.0, beta2=0.0, lr=0.0, batch_size=1)
        selector = make_selector(seed=2, text_dim=4, hidden=3)
        lap = normalized_laplacian(kg)
        opt = make_optimizer(selector.parameters(), config)
        got = finetune_step(cache, frozen, selector, queries[:1], config, lap, opt, SeededRng(5))

        from graphret.pretrain import loss_bce, loss_rank
        from graphret.selector import retrieval_scores

        ctx = cache.context_for(queries[0].text, queries[0].mentioned)
        # reproduce the same gumbel stream used inside the step
        fwd = selector_forward(cache, frozen, selector, ctx, config, SeededRng(5), "stochastic")
        scores = retrieval_scores(fwd.zt, fwd.gates, selector, config)
        pos = np.array([kg.id2pos[i] for i in sorted(queries[0].positives)])
        neg = np.array([i for i, e in enumerate(kg.ent_ids) if e not in set(queries[0].positives)])
        expected = (
            config.alpha1 * loss_bce(scores, pos, neg)
            + (1 - config.alpha1) * loss_rank(scores, pos, neg)
        ).item()
        assert abs(got - expected) < 1e-12  # NCE term is exactly zero for batch of 1

    def test_zero_lr_keeps_selector_bitwise(self):
        kg, cache, frozen, queries = build_finetune_fixture()
        config = FinetuneConfig(lr=0.0, batch_size=2)
        selector = make_selector(seed=3, text_dim=4, hidden=3)
        lap = normalized_laplacian(kg)
        opt = make_optimizer(selector.parameters(), config)
        before = [p.data.copy() for p in selector.parameters()]
        finetune_step(cache, frozen, selector, queries[:2], config, lap, opt, SeededRng(1))
        for b, p in zip(before, selector.parameters()):
            assert np.array_equal(b, p.data)

    def test_backbone_frozen(self):
        kg, cache, frozen, queries = build_finetune_fixture()
        config = FinetuneConfig(lr=0.5, batch_size=3, epochs=2)
        checksum = frozen.checksum()
        raw = [p.data.copy() for p in frozen.parameters()]
        finetune(cache, frozen, queries, config, SeededRng(11), prompt_dim=4, selector_dim=4)
        assert frozen.checksum() == checksum
        for b, p in zip(raw, frozen.parameters()):
            assert np.array_equal(b, p.data)

    def test_gates_supervision_mode_runs(self):
        kg, cache, frozen, queries = build_finetune_fixture()
        config = FinetuneConfig(lr=0.1, batch_size=3, epochs=1, supervision="gates")
        sel, log = finetune(cache, frozen, queries, config, SeededRng(2), prompt_dim=4, selector_dim=4)
        assert len(log.entries) == 1

    def test_full_objective_gradient(self):
        kg, cache, frozen, queries = build_finetune_fixture()
        config = FinetuneConfig()
        selector = make_selector(seed=5, text_dim=4, hidden=3, prompt=2, sel=2)
        # nonzero biases keep ReLU inputs off the kink
        rng = SeededRng(66)
        for name, p in selector.named_parameters():
            if name.endswith(("_b1", "_b2", "b")) or name in ("prompt_b1", "prompt_b2", "gate_b1", "gate_b2", "score_b"):
                p.data = rng.normal(p.data.shape) * 0.3
        lap = normalized_laplacian(kg)

        from graphret.pretrain import loss_bce, loss_rank
        from graphret.selector import loss_con as lcon, loss_size as lsize, retrieval_scores

        def build():
            nce_pairs = []
            total = Tensor(0.0)
            for query in queries[:2]:
                ctx = cache.context_for(query.text, query.mentioned)
                fwd = selector_forward(cache, frozen, selector, ctx, config, None, "deterministic")
                nce_pairs.append((fwd.pooled_projected, ctx.q))
                scores = retrieval_scores(fwd.zt, fwd.gates, selector, config)
                pos = np.array([kg.id2pos[i] for i in sorted(query.positives)])
                neg = np.array([i for i, e in enumerate(kg.ent_ids) if e not in set(query.positives)])
                total = total + config.alpha1 * loss_bce(scores, pos, neg)
                total = total + (1 - config.alpha1) * loss_rank(scores, pos, neg)
                total = total + config.beta1 * lsize(fwd.gates) + config.beta2 * lcon(fwd.gates, lap)
            return total / 2.0 + loss_nce(nce_pairs, config.tau_nce)

        n_params = sum(p.data.size for p in selector.parameters())
        assert n_params <= 200
        assert grad_check(build, selector.parameters()) < 1e-4


class TestFinetuneLoop:
    def test_zero_epochs_returns_initialization(self):
        kg, cache, frozen, queries = build_finetune_fixture()
        config = FinetuneConfig(epochs=0)
        sel, log = finetune(cache, frozen, queries, config, SeededRng(13), prompt_dim=4, selector_dim=4)
        ref = init_selector_params(SeededRng(13), 4, 3, 4, 4)
        for (_, a), (_, b) in zip(sel.named_parameters(), ref.named_parameters()):
            assert np.array_equal(a.data, b.data)
        assert log.entries == []

    def test_identical_seeds_identical_selectors(self):
        kg, cache, frozen, queries = build_finetune_fixture()
        config = FinetuneConfig(lr=0.05, batch_size=2, epochs=2)
        s1, l1 = finetune(cache, frozen, queries, config, SeededRng(21), prompt_dim=4, selector_dim=4)
        s2, l2 = finetune(cache, frozen, queries, config, SeededRng(21), prompt_dim=4, selector_dim=4)
        for (_, a), (_, b) in zip(s1.named_parameters(), s2.named_parameters()):
            assert np.array_equal(a.data, b.data)
        assert l1.lines() == l2.lines()

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            FinetuneConfig(epsilon=0.0)
        with pytest.raises(ConfigError):
            FinetuneConfig(tau_nce=-1.0)
        with pytest.raises(ConfigError):
            FinetuneConfig(nce="pairwise")


class TestSelectorCheckpoint:
    def test_roundtrip(self, tmp_path):
        sel = make_selector(seed=8)
        path = tmp_path / "selector.ckpt"
        save_selector(path, sel, backbone_layers=2)
        loaded, layers = load_selector(path)
        assert layers == 2
        for (_, a), (_, b) in zip(sel.named_parameters(), loaded.named_parameters()):
            assert np.array_equal(a.data, b.data)

    def test_rejects_retriever_checkpoint(self, tmp_path):
        from graphret.retriever import save_retriever

        params = init_retriever_params(SeededRng(1), 4, 3, 1)
        path = tmp_path / "model.ckpt"
        save_retriever(path, params)
        from graphret.errors import ValidationError

        with pytest.raises(ValidationError):
            load_selector(path)
