"""Query-conditioned subgraph selection with a frozen backbone.

Each entity's frozen final-layer state is concatenated with two
query-derived blocks (a learned prompt projection and a direct query
projection, both broadcast across entities).  A gate MLP over that
representation yields per-entity selection probabilities through a
Gumbel-Sigmoid relaxation; thresholding induces the subgraph.

Fine-tuning combines retrieval supervision (through a thin trainable
scoring head), a contrastive term aligning the pooled selected
representation with its own query across the batch, and size plus
Laplacian-smoothness penalties on the gate vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError, ShapeError, ValidationError
from .kg import KnowledgeGraph, normalized_laplacian
from .numerics import SeededRng
from .pretrain import loss_bce, loss_rank, make_optimizer
from .retriever import GraphCache, QueryContext, RetrieverParams, forward

GUMBEL_CLAMP = 1e-12


@dataclass
class FinetuneConfig:
    beta1: float = 0.01
    beta2: float = 0.1
    tau_gumbel: float = 0.5
    tau_nce: float = 0.07
    epsilon: float = 0.5
    alpha1: float = 0.3
    lr: float = 5e-4
    batch_size: int = 8
    epochs: int = 20
    gate: str = "standard"  # "standard" | "literal" (double-squashed form)
    nce: str = "matched"  # "matched" | "cross_pairs"
    pool: str = "sum"  # "sum" | "mean"
    supervision: str = "head"  # "head" | "gates"
    rank_loss: str = "ratio"
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("beta weights must be nonnegative")
        if self.tau_gumbel <= 0 or self.tau_nce <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0.0 <= self.alpha1 <= 1.0:
            raise ConfigError(f"alpha1 must lie in [0, 1], got {self.alpha1}")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        for name, options in (
            ("gate", ("standard", "literal")),
            ("nce", ("matched", "cross_pairs")),
            ("pool", ("sum", "mean")),
            ("supervision", ("head", "gates")),
            ("rank_loss", ("ratio", "log_ratio")),
            ("optimizer", ("sgd", "adam")),
        ):
            if getattr(self, name) not in options:
                raise ConfigError(f"unknown {name} {getattr(self, name)!r}")


@dataclass
class SelectorParams:
    """Learnable tensors of the subgraph selector (backbone stays frozen)."""

    prompt_w1: Parameter  # (text_dim, prompt_dim)
    prompt_b1: Parameter
    prompt_w2: Parameter  # (prompt_dim, prompt_dim)
    prompt_b2: Parameter
    w1: Parameter  # (prompt_dim, hidden)
    w2: Parameter  # (text_dim, hidden)
    gate_w1: Parameter  # (3*hidden, selector_dim)
    gate_b1: Parameter
    gate_w2: Parameter  # (selector_dim, 1)
    gate_b2: Parameter
    pool_projection: Parameter  # (3*hidden, text_dim)
    score_w: Parameter  # (3*hidden, 1) thin retrieval head
    score_b: Parameter

    @property
    def text_dim(self):
        return self.prompt_w1.data.shape[0]

    @property
    def prompt_dim(self):
        return self.prompt_w1.data.shape[1]

    @property
    def hidden_dim(self):
        return self.w1.data.shape[1]

    @property
    def selector_dim(self):
        return self.gate_w1.data.shape[1]

    @property
    def concat_dim(self):
        return self.gate_w1.data.shape[0]

    def named_parameters(self):
        return [
            ("prompt_w1", self.prompt_w1),
            ("prompt_b1", self.prompt_b1),
            ("prompt_w2", self.prompt_w2),
            ("prompt_b2", self.prompt_b2),
            ("w1", self.w1),
            ("w2", self.w2),
            ("gate_w1", self.gate_w1),
            ("gate_b1", self.gate_b1),
            ("gate_w2", self.gate_w2),
            ("gate_b2", self.gate_b2),
            ("pool_projection", self.pool_projection),
            ("score_w", self.score_w),
            ("score_b", self.score_b),
        ]

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def init_selector_params(
    rng: SeededRng, text_dim: int, hidden_dim: int, prompt_dim: int, selector_dim: int
) -> SelectorParams:
    r = rng.substream("init/selector")

    def glorot(fi, fo, shape):
        a = np.sqrt(6.0 / (fi + fo))
        return (r.uniform(shape) * 2.0 - 1.0) * a

    c = 3 * hidden_dim
    return SelectorParams(
        prompt_w1=Parameter(glorot(text_dim, prompt_dim, (text_dim, prompt_dim)), "prompt_w1"),
        prompt_b1=Parameter(np.zeros(prompt_dim), "prompt_b1"),
        prompt_w2=Parameter(glorot(prompt_dim, prompt_dim, (prompt_dim, prompt_dim)), "prompt_w2"),
        prompt_b2=Parameter(np.zeros(prompt_dim), "prompt_b2"),
        w1=Parameter(glorot(prompt_dim, hidden_dim, (prompt_dim, hidden_dim)), "w1"),
        w2=Parameter(glorot(text_dim, hidden_dim, (text_dim, hidden_dim)), "w2"),
        gate_w1=Parameter(glorot(c, selector_dim, (c, selector_dim)), "gate_w1"),
        gate_b1=Parameter(np.zeros(selector_dim), "gate_b1"),
        gate_w2=Parameter(glorot(selector_dim, 1, (selector_dim, 1)), "gate_w2"),
        gate_b2=Parameter(np.zeros(1), "gate_b2"),
        pool_projection=Parameter(glorot(c, text_dim, (c, text_dim)), "pool_projection"),
        score_w=Parameter(glorot(c, 1, (c, 1)), "score_w"),
        score_b=Parameter(np.zeros(1), "score_b"),
    )


# ----------------------------------------------------------------------
# forward pieces
# ----------------------------------------------------------------------


def query_conditioned_embedding(frozen_z_star: Tensor, selector: SelectorParams, q) -> Tensor:
    """Concat(Z*_e, W1 p, W2 q) with the two query blocks broadcast to all
    entity rows; p is the 2-layer prompt MLP of the query embedding."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (selector.text_dim,):
        raise ShapeError(f"query has shape {q.shape}, expected ({selector.text_dim},)")
    if frozen_z_star.data.ndim != 2 or frozen_z_star.data.shape[1] != selector.hidden_dim:
        raise ShapeError(
            f"entity states have shape {frozen_z_star.data.shape}, expected (V, {selector.hidden_dim})"
        )
    qt = Tensor(q)
    p = ad.matmul(
        (ad.matmul(qt, selector.prompt_w1) + selector.prompt_b1).relu(), selector.prompt_w2
    ) + selector.prompt_b2
    block1 = ad.matmul(p, selector.w1)  # (hidden,)
    block2 = ad.matmul(qt, selector.w2)  # (hidden,)
    n = frozen_z_star.data.shape[0]
    return ad.concat_cols([frozen_z_star, ad.tile_row(block1, n), ad.tile_row(block2, n)])


def gate_logits(zt: Tensor, selector: SelectorParams) -> Tensor:
    hiddenned = (ad.matmul(zt, selector.gate_w1) + selector.gate_b1).relu()
    out = ad.matmul(hiddenned, selector.gate_w2) + selector.gate_b2
    return out.reshape(zt.data.shape[0])


def _gumbel_array(rng: SeededRng, n: int) -> np.ndarray:
    u = np.clip(rng.uniform(n), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gate_probabilities(
    zt: Tensor,
    selector: SelectorParams,
    tau_gumbel: float,
    rng: SeededRng | None,
    mode: str = "deterministic",
    variant: str = "standard",
) -> Tensor:
    """Per-entity selection probabilities in (0, 1).

    standard: sigmoid((logit + g - g') / tau) with two Gumbel draws
    (logistic noise); deterministic mode drops the noise.  literal:
    the double-squashed form sigmoid(sigmoid(logit + g) / tau).
    """
    if tau_gumbel <= 0:
        raise ConfigError(f"tau_gumbel must be positive, got {tau_gumbel}")
    if mode not in ("stochastic", "deterministic"):
        raise ConfigError(f"unknown gate mode {mode!r}")
    if variant not in ("standard", "literal"):
        raise ConfigError(f"unknown gate variant {variant!r}")
    logits = gate_logits(zt, selector)
    n = logits.data.shape[0]
    if mode == "stochastic":
        if rng is None:
            raise ConfigError("stochastic gates need an rng")
        if variant == "standard":
            noise = _gumbel_array(rng, n) - _gumbel_array(rng, n)
        else:
            noise = _gumbel_array(rng, n)
    else:
        noise = np.zeros(n)
    if variant == "standard":
        return ((logits + Tensor(noise)) / tau_gumbel).sigmoid()
    return ((logits + Tensor(noise)).sigmoid() / tau_gumbel).sigmoid()


@dataclass
class SubgraphSelection:
    """Thresholded gate vector and the induced entity/edge/relation sets."""

    gates: np.ndarray  # (V,) probabilities
    epsilon: float
    positions: np.ndarray  # entity positions with gate > epsilon, ascending
    entity_ids: list
    triples: list  # (head_id, rel_id, tail_id) with both endpoints selected
    relation_ids: set


def induce_subgraph(kg: KnowledgeGraph, gates: np.ndarray, epsilon: float) -> SubgraphSelection:
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (kg.num_entities,):
        raise ShapeError(f"gate vector has shape {gates.shape}, expected ({kg.num_entities},)")
    if not 0.0 < epsilon < 1.0:
        raise ConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    positions = np.flatnonzero(gates > epsilon)
    selected = set(positions.tolist())
    triples = [
        (h, r, t)
        for (h, r, t), sp_, tp_ in zip(kg.triples, kg.src, kg.dst)
        if int(sp_) in selected and int(tp_) in selected
    ]
    return SubgraphSelection(
        gates=gates,
        epsilon=float(epsilon),
        positions=positions,
        entity_ids=[kg.ent_ids[i] for i in positions],
        triples=triples,
        relation_ids={r for _, r, _ in triples},
    )


def pooled_repr(zt: Tensor, s: Tensor, positions, pool: str = "sum") -> Tensor:
    """Gate-weighted sum of selected entity rows (mean divides by the gate
    mass); empty selection pools to the zero vector."""
    positions = np.asarray(positions, dtype=np.int64)
    if len(positions) == 0:
        return Tensor(np.zeros(zt.data.shape[1]))
    rows = zt.take(positions)
    weights = s.take(positions)
    weighted = (rows * weights.reshape(len(positions), 1)).sum(axis=0)
    if pool == "mean":
        return weighted / weights.sum()
    return weighted


def loss_size(s: Tensor) -> Tensor:
    return s.sum()


def loss_con(s: Tensor, laplacian: sp.spmatrix) -> Tensor:
    return ad.quad_form(s, laplacian)


def loss_nce(pairs, tau_nce: float, variant: str = "matched") -> Tensor:
    """Batch contrastive loss over (pooled-projection, query) pairs.

    matched: the denominator sums each pair's own similarity, exactly the
    printed form.  cross_pairs: the denominator for anchor j sums
    sim(G_i, q_j) over the batch (classic in-batch negatives).
    """
    if len(pairs) == 0:
        raise NumericError("loss_nce requires a nonempty batch")
    if tau_nce <= 0:
        raise ConfigError(f"tau_nce must be positive, got {tau_nce}")
    if variant == "matched":
        sims = ad.concat1d(
            [ad.cosine(ghat, Tensor(np.asarray(q))) / tau_nce for ghat, q in pairs]
        )
        return ad.logsumexp(sims) - sims.mean()
    if variant != "cross_pairs":
        raise ConfigError(f"unknown nce variant {variant!r}")
    total = Tensor(0.0)
    for j, (_, qj) in enumerate(pairs):
        qv = Tensor(np.asarray(qj))
        col = ad.concat1d([ad.cosine(ghat_i, qv) / tau_nce for ghat_i, _ in pairs])
        total = total + (ad.logsumexp(col) - col.take(np.array([j])).sum())
    return total / float(len(pairs))


# ----------------------------------------------------------------------
# fine-tuning
# ----------------------------------------------------------------------


@dataclass
class SelectorForward:
    """Per-query tensors produced during one fine-tuning pass."""

    zt: Tensor
    gates: Tensor
    selection: SubgraphSelection
    pooled_projected: Tensor


def selector_forward(
    cache: GraphCache,
    frozen: RetrieverParams,
    selector: SelectorParams,
    ctx: QueryContext,
    config: FinetuneConfig,
    rng: SeededRng | None,
    mode: str,
) -> SelectorForward:
    with ad.no_grad():
        _, z_star = forward(cache, frozen, ctx)
    zt = query_conditioned_embedding(Tensor(z_star.data), selector, ctx.q)
    gates = gate_probabilities(zt, selector, config.tau_gumbel, rng, mode, config.gate)
    selection = induce_subgraph(cache.kg, gates.data, config.epsilon)
    pooled = pooled_repr(zt, gates, selection.positions, config.pool)
    projected = ad.matmul(pooled, selector.pool_projection)
    return SelectorForward(zt, gates, selection, projected)


def retrieval_scores(zt: Tensor, gates: Tensor, selector: SelectorParams, config: FinetuneConfig) -> Tensor:
    if config.supervision == "gates":
        return gates
    logits = ad.matmul(zt, selector.score_w).reshape(zt.data.shape[0]) + selector.score_b
    return logits.sigmoid()


def finetune_step(
    cache: GraphCache,
    frozen: RetrieverParams,
    selector: SelectorParams,
    batch,
    config: FinetuneConfig,
    laplacian: sp.spmatrix,
    opt,
    rng: SeededRng,
) -> float:
    """One update: retrieval losses + contrastive term + size/connectivity
    penalties; gradients reach only the selector parameters."""
    opt.zero_grad()
    kg = cache.kg
    nce_pairs = []
    per_query = Tensor(0.0)
    for query in batch:
        ctx = cache.context_for(query.text, query.mentioned)
        fwd = selector_forward(cache, frozen, selector, ctx, config, rng, "stochastic")
        nce_pairs.append((fwd.pooled_projected, ctx.q))
        scores = retrieval_scores(fwd.zt, fwd.gates, selector, config)
        pos = np.fromiter(
            (kg.id2pos[i] for i in sorted(query.positives)), dtype=np.int64,
            count=len(query.positives),
        )
        pos_set = set(query.positives)
        neg = np.fromiter(
            (i for i, eid in enumerate(kg.ent_ids) if eid not in pos_set),
            dtype=np.int64,
            count=kg.num_entities - len(pos_set),
        )
        retrieval = config.alpha1 * loss_bce(scores, pos, neg) + (
            1.0 - config.alpha1
        ) * loss_rank(scores, pos, neg, config.rank_loss)
        penalty = config.beta1 * loss_size(fwd.gates) + config.beta2 * loss_con(
            fwd.gates, laplacian
        )
        per_query = per_query + retrieval + penalty
    total = per_query / float(len(batch)) + loss_nce(nce_pairs, config.tau_nce, config.nce)
    total.backward()
    opt.step()
    return total.item()


@dataclass
class FinetuneLog:
    entries: list = field(default_factory=list)

    def add(self, step: int, loss: float):
        self.entries.append(("finetune", step, loss))

    def lines(self):
        return [f"{p}\t{s}\t{v!r}" for p, s, v in self.entries]

    def summary(self):
        losses = [v for _, _, v in self.entries]
        return {
            "finetune_final_loss": losses[-1] if losses else None,
            "steps": len(self.entries),
        }


def finetune(
    cache: GraphCache,
    frozen: RetrieverParams,
    queries,
    config: FinetuneConfig,
    rng: SeededRng,
    prompt_dim: int = 16,
    selector_dim: int = 16,
) -> tuple[SelectorParams, FinetuneLog]:
    """Epochs of shuffled mini-batches; the backbone is never touched."""
    if not queries:
        raise ValidationError("finetune needs at least one labeled query")
    selector = init_selector_params(
        rng, cache.provider.dimension, frozen.hidden_dim, prompt_dim, selector_dim
    )
    laplacian = normalized_laplacian(cache.kg)
    opt = make_optimizer(selector.parameters(), config)
    r_order = rng.substream("finetune/order")
    r_gumbel = rng.substream("selector/gumbel")
    log = FinetuneLog()
    step = 0
    for _ in range(config.epochs):
        order = r_order.permutation(len(queries))
        for lo in range(0, len(order), config.batch_size):
            batch = [queries[i] for i in order[lo : lo + config.batch_size]]
            try:
                loss = finetune_step(
                    cache, frozen, selector, batch, config, laplacian, opt, r_gumbel
                )
            except NumericError as e:
                raise NumericError(f"finetune step {step}: {e}") from e
            log.add(step, loss)
            step += 1
    return selector, log


# ----------------------------------------------------------------------
# checkpointing
# ----------------------------------------------------------------------


def save_selector(path, selector: SelectorParams, backbone_layers: int):
    dims = {
        "hidden_dim": selector.hidden_dim,
        "layers": backbone_layers,
        "text_dim": selector.text_dim,
        "prompt_dim": selector.prompt_dim,
        "selector_dim": selector.selector_dim,
    }
    save_checkpoint(path, "selector", dims, {n: p.data for n, p in selector.named_parameters()})


def load_selector(path) -> tuple[SelectorParams, int]:
    header, tensors = load_checkpoint(path, expected_component="selector")
    params = init_selector_params(
        SeededRng(0),
        header["text_dim"],
        header["hidden_dim"],
        header["extra"]["prompt_dim"],
        header["extra"]["selector_dim"],
    )
    for name, p in params.named_parameters():
        if name not in tensors:
            raise ValidationError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise ValidationError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {p.data.shape}"
            )
        p.data = tensors[name].copy()
    return params, header["layers"]
