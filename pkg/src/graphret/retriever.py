"""Query-conditioned relational message passing and entity relevance.

The forward pass initializes entity states from the query (mentioned
entities get the projected query embedding, everything else zero),
propagates for L layers with relation-modulated messages and sum
aggregation, and scores every entity with a sigmoid head.

Messages use the multiplicative form m = g(Z_r) * Z_u over directed
edges; the destination state enters through the self weight of the
update.  Relation states are carried forward through the per-layer
relation MLP g.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RowIndexer, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ShapeError, ValidationError
from .kg import EmbeddingProvider, KnowledgeGraph
from .numerics import SeededRng


@dataclass
class LayerParams:
    rel_w1: Parameter
    rel_b1: Parameter
    rel_w2: Parameter
    rel_b2: Parameter
    w_self: Parameter
    w_agg: Parameter
    bias: Parameter


@dataclass
class RetrieverParams:
    """All learnable tensors of the query-conditioned retriever."""

    input_projection: Parameter  # (text_dim, hidden)
    layers: list[LayerParams]
    score_w1: Parameter  # (hidden, hidden)
    score_b1: Parameter
    score_w2: Parameter  # (hidden, 1)
    score_b2: Parameter

    @property
    def text_dim(self):
        return self.input_projection.data.shape[0]

    @property
    def hidden_dim(self):
        return self.input_projection.data.shape[1]

    @property
    def num_layers(self):
        return len(self.layers)

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [("input_projection", self.input_projection)]
        for i, lp in enumerate(self.layers):
            for f in ("rel_w1", "rel_b1", "rel_w2", "rel_b2", "w_self", "w_agg", "bias"):
                out.append((f"layer{i}.{f}", getattr(lp, f)))
        out.extend(
            [
                ("score_w1", self.score_w1),
                ("score_b1", self.score_b1),
                ("score_w2", self.score_w2),
                ("score_b2", self.score_b2),
            ]
        )
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def checksum(self) -> float:
        return float(sum(np.abs(p.data).sum() for p in self.parameters()))


def _glorot(rng: SeededRng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(shape) * 2.0 - 1.0) * a


def init_retriever_params(
    rng: SeededRng, text_dim: int, hidden_dim: int, num_layers: int
) -> RetrieverParams:
    if num_layers < 1:
        raise ShapeError(f"need at least one layer, got {num_layers}")
    r = rng.substream("init/retriever")
    h, t = hidden_dim, text_dim
    layers = []
    for i in range(num_layers):
        layers.append(
            LayerParams(
                rel_w1=Parameter(_glorot(r, h, h, (h, h)), f"layer{i}.rel_w1"),
                rel_b1=Parameter(np.zeros(h), f"layer{i}.rel_b1"),
                rel_w2=Parameter(_glorot(r, h, h, (h, h)), f"layer{i}.rel_w2"),
                rel_b2=Parameter(np.zeros(h), f"layer{i}.rel_b2"),
                w_self=Parameter(_glorot(r, h, h, (h, h)), f"layer{i}.w_self"),
                w_agg=Parameter(_glorot(r, h, h, (h, h)), f"layer{i}.w_agg"),
                bias=Parameter(np.zeros(h), f"layer{i}.bias"),
            )
        )
    return RetrieverParams(
        input_projection=Parameter(_glorot(r, t, h, (t, h)), "input_projection"),
        layers=layers,
        score_w1=Parameter(_glorot(r, h, h, (h, h)), "score_w1"),
        score_b1=Parameter(np.zeros(h), "score_b1"),
        score_w2=Parameter(_glorot(r, h, 1, (h, 1)), "score_w2"),
        score_b2=Parameter(np.zeros(1), "score_b2"),
    )


@dataclass(frozen=True)
class QueryContext:
    """Embedded query plus the entity ids it explicitly mentions."""

    q: np.ndarray
    mentioned: frozenset[int]


class GraphCache:
    """Per-graph constants: edge routing indexers and relation text matrix."""

    def __init__(self, kg: KnowledgeGraph, provider: EmbeddingProvider):
        self.kg = kg
        self.provider = provider
        self.src_index = RowIndexer(kg.src, num_rows=kg.num_entities)
        self.rel_index = RowIndexer(kg.rel, num_rows=kg.num_relations)
        self.dst_index = RowIndexer(kg.dst, num_rows=kg.num_entities)
        if kg.num_relations:
            self.rel_text = np.stack([provider.embed(name) for name in kg.rel_names])
        else:
            self.rel_text = np.zeros((0, provider.dimension))

    def context_for(self, query_text: str, mentioned_ids) -> QueryContext:
        return QueryContext(self.provider.embed(query_text), frozenset(mentioned_ids))


def _mlp2(x: Tensor, w1: Parameter, b1: Parameter, w2: Parameter, b2: Parameter) -> Tensor:
    return ad.matmul((ad.matmul(x, w1) + b1).relu(), w2) + b2


def init_states(cache: GraphCache, params: RetrieverParams, ctx: QueryContext):
    """Entity states: projected query on mentioned rows, zero elsewhere;
    relation states: projected relation text embeddings."""
    kg = cache.kg
    if ctx.q.shape != (params.text_dim,):
        raise ShapeError(
            f"query embedding has shape {ctx.q.shape}, expected ({params.text_dim},)"
        )
    for eid in ctx.mentioned:
        if eid not in kg.id2pos:
            raise ValidationError(f"mentioned entity {eid} not in graph")
    indicator = np.zeros((kg.num_entities, 1))
    for eid in ctx.mentioned:
        indicator[kg.id2pos[eid], 0] = 1.0
    q_proj = ad.matmul(Tensor(ctx.q), params.input_projection)  # (hidden,)
    z0 = ad.matmul(Tensor(indicator), q_proj.reshape(1, params.hidden_dim))
    zr0 = ad.matmul(Tensor(cache.rel_text), params.input_projection)
    return z0, zr0


def layer_forward(cache: GraphCache, params: RetrieverParams, layer_index: int, z: Tensor, zr: Tensor):
    lp = params.layers[layer_index]
    zr_next = _mlp2(zr, lp.rel_w1, lp.rel_b1, lp.rel_w2, lp.rel_b2)
    messages = ad.gather_rows(zr_next, cache.rel_index) * ad.gather_rows(z, cache.src_index)
    agg = ad.scatter_add_rows(messages, cache.dst_index)
    z_next = (ad.matmul(z, lp.w_self) + ad.matmul(agg, lp.w_agg) + lp.bias).relu()
    return z_next, zr_next


def forward(cache: GraphCache, params: RetrieverParams, ctx: QueryContext):
    """Full pass; returns (relevance scores (V,), final entity states (V,H))."""
    z, zr = init_states(cache, params, ctx)
    for li in range(params.num_layers):
        z, zr = layer_forward(cache, params, li, z, zr)
    logits = _mlp2(z, params.score_w1, params.score_b1, params.score_w2, params.score_b2)
    scores = logits.reshape(cache.kg.num_entities).sigmoid()
    return scores, z


def relevance_scores(cache: GraphCache, params: RetrieverParams, ctx: QueryContext) -> Tensor:
    scores, _ = forward(cache, params, ctx)
    return scores


def save_retriever(path, params: RetrieverParams):
    dims = {
        "hidden_dim": params.hidden_dim,
        "layers": params.num_layers,
        "text_dim": params.text_dim,
    }
    tensors = {name: p.data for name, p in params.named_parameters()}
    save_checkpoint(path, "retriever", dims, tensors)


def load_retriever(path) -> RetrieverParams:
    header, tensors = load_checkpoint(path, expected_component="retriever")
    h, t, nl = header["hidden_dim"], header["text_dim"], header["layers"]
    rng = SeededRng(0)
    params = init_retriever_params(rng, t, h, nl)
    for name, p in params.named_parameters():
        if name not in tensors:
            raise ValidationError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise ValidationError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {p.data.shape}"
            )
        p.data = tensors[name].copy()
    return params
