"""Two-phase pre-training: masked-triple completion, then prototype alignment.

Phase I samples masked triples, embeds a pseudo-query from the known
entity and relation, and optimizes a BCE + ranking mixture over the
relevance scores.  Phase II samples query-entity pairs per domain,
builds domain prototypes from final-layer states, and optimizes the
prototype cross-entropy plus an information-gain contrast that compares
alignment with the true prototype against a shuffled one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, NumericError, ValidationError
from .kg import KnowledgeGraph
from .numerics import SeededRng
from .retriever import (
    GraphCache,
    QueryContext,
    RetrieverParams,
    forward,
    init_retriever_params,
)


@dataclass(frozen=True)
class PseudoQuery:
    masked_side: str  # "head" or "tail"
    known_id: int
    relation_id: int
    answer_id: int
    positives: frozenset
    negatives: tuple
    text: str


@dataclass
class TrainConfig:
    alpha1: float = 0.3
    alpha2: float = 0.1
    alpha3: float = 0.1
    tau_proto: float = 0.1
    lr: float = 5e-4
    batch_size: int = 4
    phase1_steps: int = 30000
    phase2_epochs: int = 20
    negatives_per_query: int = 128
    proto_sample_per_domain: int = 4
    optimizer: str = "sgd"
    rank_loss: str = "ratio"

    def __post_init__(self):
        if not 0.0 <= self.alpha1 <= 1.0:
            raise ConfigError(f"alpha1 must lie in [0, 1], got {self.alpha1}")
        if self.tau_proto <= 0:
            raise ConfigError(f"tau_proto must be positive, got {self.tau_proto}")
        if self.lr < 0:
            raise ConfigError(f"lr must be nonnegative, got {self.lr}")
        for name in ("batch_size", "negatives_per_query", "proto_sample_per_domain"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("phase1_steps", "phase2_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.rank_loss not in ("ratio", "log_ratio"):
            raise ConfigError(f"unknown rank_loss {self.rank_loss!r}")


class Sgd:
    """Plain gradient descent with a fixed learning rate."""

    def __init__(self, params: list[Parameter], lr: float):
        self.params = params
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            p.data = p.data - self.lr * p.grad


class Adam:
    """Adaptive-moment variant; fully deterministic, kept behind config."""

    def __init__(self, params: list[Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / (1 - self.beta1**self.t)
            vhat = self.v[i] / (1 - self.beta2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, config.lr)
    return Sgd(params, config.lr)


# ----------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------


class CompletionIndex:
    """Maps (known entity, relation, side) to the full completion set."""

    def __init__(self, kg: KnowledgeGraph):
        self.tails: dict[tuple[int, int], set] = {}
        self.heads: dict[tuple[int, int], set] = {}
        for h, r, t in kg.triples:
            self.tails.setdefault((h, r), set()).add(t)
            self.heads.setdefault((t, r), set()).add(h)

    def positives(self, side: str, known: int, rel: int) -> frozenset:
        table = self.tails if side == "tail" else self.heads
        return frozenset(table.get((known, rel), set()))


def sample_masked_triple(
    kg: KnowledgeGraph,
    rng: SeededRng,
    negatives_per_query: int,
    completions: CompletionIndex | None = None,
) -> PseudoQuery:
    """Uniform triple and side; positives are every completion of the
    unmasked pair, negatives a uniform no-replacement sample of the rest."""
    if kg.num_triples == 0:
        raise ValidationError("cannot sample a masked triple from an empty graph")
    if completions is None:
        completions = CompletionIndex(kg)
    h, r, t = kg.triples[int(rng.integers(0, kg.num_triples))]
    side = "tail" if rng.random() < 0.5 else "head"
    known, answer = (h, t) if side == "tail" else (t, h)
    positives = completions.positives(side, known, r)
    candidates = [eid for eid in kg.ent_ids if eid not in positives]
    negatives = tuple(rng.choice_without_replacement(candidates, negatives_per_query))
    text = f"{kg.ent_names[kg.id2pos[known]]} {kg.rel_names[kg.relid2pos[r]]}"
    return PseudoQuery(side, known, r, answer, positives, negatives, text)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


_P_FLOOR = 1e-12  # sigmoid saturates to exactly 0/1 in float64 beyond |x|~37


def loss_bce(scores: Tensor, pos_idx, neg_idx) -> Tensor:
    """-mean log P over positives - mean log (1-P) over negatives.

    Scores are clipped into [1e-12, 1-1e-12]: interior values pass through
    exactly, fully saturated sigmoids keep the loss finite.
    """
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise NumericError("loss_bce requires nonempty positive and negative sets")
    pos = scores.take(np.asarray(pos_idx, dtype=np.int64)).clamp(_P_FLOOR, 1.0 - _P_FLOOR)
    neg = scores.take(np.asarray(neg_idx, dtype=np.int64)).clamp(_P_FLOOR, 1.0 - _P_FLOOR)
    return -(pos.log().mean()) - ((1.0 - neg).log().mean())


def loss_rank(scores: Tensor, pos_idx, neg_idx, variant: str = "ratio") -> Tensor:
    """Margin-style ranking loss.

    "ratio" (default) is the plain score ratio
    -(1/|P|) sum_p P(p) / sum_n P(n); "log_ratio" takes the log of each
    positive's ratio instead.
    """
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise NumericError("loss_rank requires nonempty positive and negative sets")
    pos = scores.take(np.asarray(pos_idx, dtype=np.int64)).clamp(_P_FLOOR, 1.0 - _P_FLOOR)
    neg_sum = scores.take(np.asarray(neg_idx, dtype=np.int64)).clamp(
        _P_FLOOR, 1.0 - _P_FLOOR
    ).sum()
    if variant == "ratio":
        return -(pos.mean() / neg_sum)
    if variant == "log_ratio":
        return -((pos / neg_sum).log().mean())
    raise ConfigError(f"unknown rank_loss variant {variant!r}")


@dataclass
class PairRecord:
    """One sampled query-entity pair with its forward-pass tensors."""

    query: PseudoQuery
    domain: int
    scores: Tensor  # (V,)
    states: Tensor  # (V, H)
    answer_state: Tensor  # (H,)


def _forward_pairs(cache: GraphCache, params: RetrieverParams, pairs) -> list[PairRecord]:
    records = []
    for pq in pairs:
        ctx = QueryContext(cache.provider.embed(pq.text), frozenset({pq.known_id}))
        scores, states = forward(cache, params, ctx)
        pos = cache.kg.id2pos[pq.answer_id]
        records.append(
            PairRecord(
                query=pq,
                domain=cache.kg.ent_domains[pos],
                scores=scores,
                states=states,
                answer_state=states.take(np.array([pos])).reshape(params.hidden_dim),
            )
        )
    return records


def _prototypes_from_records(records: list[PairRecord]) -> dict[int, Tensor]:
    by_domain: dict[int, list[Tensor]] = {}
    for rec in records:
        by_domain.setdefault(rec.domain, []).append(rec.answer_state)
    protos = {}
    for d in sorted(by_domain):
        acc = by_domain[d][0]
        for s in by_domain[d][1:]:
            acc = acc + s
        protos[d] = acc / float(len(by_domain[d]))
    return protos


def compute_prototypes(cache: GraphCache, params: RetrieverParams, pairs) -> dict[int, Tensor]:
    """Per-domain mean of final-layer answer-entity states, each pair
    evaluated under its own query context."""
    if not pairs:
        raise ValidationError("compute_prototypes needs at least one pair")
    return _prototypes_from_records(_forward_pairs(cache, params, pairs))


def _cosine_rows(z: Tensor, c: Tensor) -> Tensor:
    """Cosine between every row of z and the vector c (zero-norm guarded)."""
    num = ad.matmul(z, c)
    row_norms = ((z * z).sum(axis=1) + 1e-24) ** 0.5
    return num / (row_norms * ad.norm(c))


def loss_proto(entity_states, pair_domains, prototypes: dict[int, Tensor], tau: float) -> Tensor:
    """Cross-entropy of each pair's state against domain prototypes."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    domains = sorted(prototypes)
    index = {d: i for i, d in enumerate(domains)}
    total = Tensor(0.0)
    for state, dom in zip(entity_states, pair_domains):
        if dom not in index:
            raise ValidationError(f"pair domain {dom} has no prototype")
        sims = ad.concat1d([ad.cosine(state, prototypes[d]) for d in domains])
        log_probs = ad.softmax_t(sims, tau).log()
        total = total - log_probs.take(np.array([index[dom]])).sum()
    return total


def sample_domain_shuffle(domains: list[int], rng: SeededRng) -> dict[int, int]:
    """Uniform non-identity permutation of the domain ids."""
    if len(domains) < 2:
        raise ValidationError("domain shuffle needs at least 2 domains")
    domains = sorted(domains)
    while True:
        perm = rng.permutation(len(domains))
        if not np.array_equal(perm, np.arange(len(domains))):
            return {domains[i]: domains[int(perm[i])] for i in range(len(domains))}


def loss_igc(
    scores: Tensor,
    entity_states: Tensor,
    prototypes: dict[int, Tensor],
    true_domain: int,
    rng: SeededRng | None = None,
    shuffle: dict[int, int] | None = None,
) -> Tensor:
    """KL(normalized scores || prototype-induced) minus KL against the
    shuffled-prototype reference."""
    if len(prototypes) < 2:
        raise ValidationError("loss_igc requires at least 2 domains")
    if true_domain not in prototypes:
        raise ValidationError(f"unknown domain id {true_domain}")
    if shuffle is None:
        if rng is None:
            raise ConfigError("loss_igc needs either an rng or an explicit shuffle")
        shuffle = sample_domain_shuffle(sorted(prototypes), rng)
    p_hat = scores / scores.sum()
    sims_true = _cosine_rows(entity_states, prototypes[true_domain])
    sims_rand = _cosine_rows(entity_states, prototypes[shuffle[true_domain]])
    p_proto = ad.softmax_t(sims_true, 1.0)
    p_rand = ad.softmax_t(sims_rand, 1.0)
    return ad.kl_div(p_hat, p_proto) - ad.kl_div(p_hat, p_rand)


# ----------------------------------------------------------------------
# training steps
# ----------------------------------------------------------------------


def _positions(kg: KnowledgeGraph, ids) -> np.ndarray:
    return np.fromiter((kg.id2pos[i] for i in ids), dtype=np.int64, count=len(ids))


def phase1_loss(cache: GraphCache, params: RetrieverParams, pq: PseudoQuery, config: TrainConfig) -> Tensor:
    ctx = QueryContext(cache.provider.embed(pq.text), frozenset({pq.known_id}))
    scores, _ = forward(cache, params, ctx)
    pos = _positions(cache.kg, sorted(pq.positives))
    neg = _positions(cache.kg, pq.negatives)
    return config.alpha1 * loss_bce(scores, pos, neg) + (1.0 - config.alpha1) * loss_rank(
        scores, pos, neg, config.rank_loss
    )


def phase1_step(cache, params, batch, config: TrainConfig, opt) -> float:
    opt.zero_grad()
    total = phase1_loss(cache, params, batch[0], config)
    for pq in batch[1:]:
        total = total + phase1_loss(cache, params, pq, config)
    total = total / float(len(batch))
    total.backward()
    opt.step()
    return total.item()


def phase2_loss(cache, params, pairs, config: TrainConfig, shuffle) -> Tensor:
    records = _forward_pairs(cache, params, pairs)
    protos = _prototypes_from_records(records)
    lp = loss_proto(
        [r.answer_state for r in records], [r.domain for r in records], protos, config.tau_proto
    )
    igc = Tensor(0.0)
    for rec in records:
        igc = igc + loss_igc(rec.scores, rec.states, protos, rec.domain, shuffle=shuffle)
    igc = igc / float(len(records))
    return config.alpha2 * lp + config.alpha3 * igc


def phase2_step(cache, params, pairs, config: TrainConfig, opt, shuffle) -> float:
    opt.zero_grad()
    total = phase2_loss(cache, params, pairs, config, shuffle)
    total.backward()
    opt.step()
    return total.item()


# ----------------------------------------------------------------------
# full loop
# ----------------------------------------------------------------------


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)  # (phase, step, loss)

    def add(self, phase: str, step: int, loss: float):
        self.entries.append((phase, step, loss))

    def lines(self) -> list[str]:
        return [f"{p}\t{s}\t{v!r}" for p, s, v in self.entries]

    def summary(self) -> dict:
        p1 = [v for p, _, v in self.entries if p == "1"]
        p2 = [v for p, _, v in self.entries if p == "2"]
        return {
            "phase1_final_loss": p1[-1] if p1 else None,
            "phase2_final_loss": p2[-1] if p2 else None,
            "steps": len(self.entries),
        }


class DomainPairSampler:
    """Uniformly samples (pseudo-query, entity) pairs whose answer lies in a
    requested domain."""

    def __init__(self, kg: KnowledgeGraph, completions: CompletionIndex):
        self.kg = kg
        self.completions = completions
        self.by_domain: dict[int, list] = {d: [] for d in kg.domains_present}
        for h, r, t in kg.triples:
            self.by_domain[kg.ent_domains[kg.id2pos[t]]].append((h, r, t, "tail"))
            self.by_domain[kg.ent_domains[kg.id2pos[h]]].append((h, r, t, "head"))

    def sample(self, rng: SeededRng, per_domain: int) -> list[PseudoQuery]:
        pairs = []
        for d in self.kg.domains_present:
            candidates = self.by_domain[d]
            if not candidates:
                raise ValidationError(f"domain {d} has no query-entity pairs to sample")
            for h, r, t, side in rng.choice_without_replacement(candidates, per_domain):
                known, answer = (h, t) if side == "tail" else (t, h)
                text = (
                    f"{self.kg.ent_names[self.kg.id2pos[known]]} "
                    f"{self.kg.rel_names[self.kg.relid2pos[r]]}"
                )
                pairs.append(PseudoQuery(side, known, r, answer, frozenset({answer}), (), text))
        return pairs


def train(
    kg: KnowledgeGraph,
    provider,
    hidden_dim: int,
    num_layers: int,
    config: TrainConfig,
    rng: SeededRng,
) -> tuple[RetrieverParams, TrainLog]:
    """Phase I steps strictly before Phase II epochs; deterministic in rng."""
    cache = GraphCache(kg, provider)
    params = init_retriever_params(rng, provider.dimension, hidden_dim, num_layers)
    opt = make_optimizer(params.parameters(), config)
    log = TrainLog()

    completions = CompletionIndex(kg)
    r_sample = rng.substream("pretrain/sampling")
    for step in range(config.phase1_steps):
        batch = [
            sample_masked_triple(kg, r_sample, config.negatives_per_query, completions)
            for _ in range(config.batch_size)
        ]
        try:
            log.add("1", step, phase1_step(cache, params, batch, config, opt))
        except NumericError as e:
            raise NumericError(f"phase 1 step {step}: {e}") from e

    if config.phase2_epochs > 0:
        if len(kg.domains_present) < 2:
            raise ValidationError("phase II needs at least 2 domains")
        sampler = DomainPairSampler(kg, completions)
        r_pairs = rng.substream("pretrain/pairs")
        r_shuffle = rng.substream("pretrain/shuffle")
        for epoch in range(config.phase2_epochs):
            pairs = sampler.sample(r_pairs, config.proto_sample_per_domain)
            shuffle = sample_domain_shuffle(kg.domains_present, r_shuffle)
            try:
                log.add("2", epoch, phase2_step(cache, params, pairs, config, opt, shuffle))
            except NumericError as e:
                raise NumericError(f"phase 2 step {epoch}: {e}") from e

    return params, log
