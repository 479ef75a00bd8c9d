"""Knowledge graph, corpus, entity-document index, and text embeddings.

All structures are immutable after load/build.  Loaders are strict: they
reject malformed lines, unknown JSON keys, dangling ids, and duplicate
triples, always reporting 1-based line numbers.

Entity and relation ids are arbitrary unique non-negative integers;
internally everything is addressed by dense position (load order), with
id<->position maps on the graph object.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ValidationError
from .numerics import cosine_sim

EQUIV_RELATION_NAME = "≡"

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs; drops empty tokens."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    title: str
    content: str
    entity_ids: tuple[int, ...]


@dataclass(frozen=True)
class Corpus:
    chunks: tuple[Chunk, ...]

    def __len__(self):
        return len(self.chunks)


class KnowledgeGraph:
    """Entities with domain labels, named relations, directed triples."""

    def __init__(self, entities, relations, triples, _source=None):
        # entities: [(id, name, domain)], relations: [(id, name)],
        # triples: [(head_id, rel_id, tail_id)]
        self.ent_ids = [int(e[0]) for e in entities]
        self.ent_names = [str(e[1]) for e in entities]
        self.ent_domains = [int(e[2]) for e in entities]
        self.rel_ids = [int(r[0]) for r in relations]
        self.rel_names = [str(r[1]) for r in relations]
        self.triples = [(int(h), int(r), int(t)) for h, r, t in triples]
        self._validate(_source)

        self.id2pos = {eid: i for i, eid in enumerate(self.ent_ids)}
        self.relid2pos = {rid: i for i, rid in enumerate(self.rel_ids)}
        n_tr = len(self.triples)
        self.src = np.fromiter(
            (self.id2pos[h] for h, _, _ in self.triples), dtype=np.int64, count=n_tr
        )
        self.rel = np.fromiter(
            (self.relid2pos[r] for _, r, _ in self.triples), dtype=np.int64, count=n_tr
        )
        self.dst = np.fromiter(
            (self.id2pos[t] for _, _, t in self.triples), dtype=np.int64, count=n_tr
        )
        self.num_domains = (max(self.ent_domains) + 1) if self.ent_domains else 0
        self.domains_present = sorted(set(self.ent_domains))

    def _validate(self, source):
        def err(msg, line=None):
            path, lines = (None, None) if source is None else source
            raise ValidationError(
                msg, path=path, line=None if lines is None or line is None else lines[line]
            )

        if len(set(self.ent_ids)) != len(self.ent_ids):
            err("duplicate entity id")
        if len(set(self.rel_ids)) != len(self.rel_ids):
            err("duplicate relation id")
        for d in self.ent_domains:
            if d < 0:
                err(f"negative domain label {d}")
        ent_set = set(self.ent_ids)
        rel_set = set(self.rel_ids)
        seen = set()
        for i, (h, r, t) in enumerate(self.triples):
            if h not in ent_set:
                err(f"triple references unknown head entity {h}", line=i)
            if t not in ent_set:
                err(f"triple references unknown tail entity {t}", line=i)
            if r not in rel_set:
                err(f"triple references unknown relation {r}", line=i)
            if (h, r, t) in seen:
                err(f"duplicate triple ({h}, {r}, {t})", line=i)
            seen.add((h, r, t))

    @property
    def num_entities(self):
        return len(self.ent_ids)

    @property
    def num_relations(self):
        return len(self.rel_ids)

    @property
    def num_triples(self):
        return len(self.triples)

    def out_degree(self, entity_id: int) -> int:
        pos = self.id2pos[entity_id]
        return int(np.sum(self.src == pos))

    def in_degree(self, entity_id: int) -> int:
        pos = self.id2pos[entity_id]
        return int(np.sum(self.dst == pos))


# ----------------------------------------------------------------------
# line-oriented loaders
# ----------------------------------------------------------------------


def _read_lines(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ValidationError("file not found", path=str(path))
    return text.splitlines()


def _parse_jsonl(path, required_keys):
    """Yield (lineno, dict) for each line, enforcing the exact key set."""
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            raise ValidationError("blank line", path=str(path), line=lineno)
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"invalid JSON: {e.msg}", path=str(path), line=lineno)
        if not isinstance(obj, dict):
            raise ValidationError("expected a JSON object", path=str(path), line=lineno)
        if set(obj) != set(required_keys):
            raise ValidationError(
                f"expected keys {sorted(required_keys)}, got {sorted(obj)}",
                path=str(path),
                line=lineno,
            )
        yield lineno, obj


def load_kg(triples_path, entities_path, relations_path) -> KnowledgeGraph:
    entities = []
    for lineno, obj in _parse_jsonl(entities_path, ("id", "name", "domain")):
        if not isinstance(obj["id"], int) or not isinstance(obj["domain"], int):
            raise ValidationError("id and domain must be integers", path=str(entities_path), line=lineno)
        entities.append((obj["id"], obj["name"], obj["domain"]))

    relations = []
    for lineno, obj in _parse_jsonl(relations_path, ("id", "name")):
        if not isinstance(obj["id"], int):
            raise ValidationError("id must be an integer", path=str(relations_path), line=lineno)
        relations.append((obj["id"], obj["name"]))

    triples = []
    triple_lines = []
    for lineno, line in enumerate(_read_lines(triples_path), start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(
                f"expected 3 tab-separated fields, got {len(parts)}",
                path=str(triples_path),
                line=lineno,
            )
        try:
            h, r, t = (int(p) for p in parts)
        except ValueError:
            raise ValidationError("non-integer id", path=str(triples_path), line=lineno)
        triples.append((h, r, t))
        triple_lines.append(lineno)

    return KnowledgeGraph(entities, relations, triples, _source=(str(triples_path), triple_lines))


def load_corpus(path, kg: KnowledgeGraph) -> Corpus:
    chunks = []
    seen_ids = set()
    for lineno, obj in _parse_jsonl(path, ("doc_id", "title", "content", "entities")):
        if obj["doc_id"] in seen_ids:
            raise ValidationError(f"duplicate doc_id {obj['doc_id']!r}", path=str(path), line=lineno)
        seen_ids.add(obj["doc_id"])
        ents = obj["entities"]
        if not isinstance(ents, list) or not all(isinstance(e, int) for e in ents):
            raise ValidationError("entities must be a list of integers", path=str(path), line=lineno)
        for e in ents:
            if e not in kg.id2pos:
                raise ValidationError(f"unknown entity id {e}", path=str(path), line=lineno)
        chunks.append(Chunk(obj["doc_id"], obj["title"], obj["content"], tuple(ents)))
    return Corpus(tuple(chunks))


def write_kg(kg: KnowledgeGraph, triples_path, entities_path, relations_path):
    with open(entities_path, "w", encoding="utf-8") as fh:
        for eid, name, dom in zip(kg.ent_ids, kg.ent_names, kg.ent_domains):
            fh.write(json.dumps({"id": eid, "name": name, "domain": dom}) + "\n")
    with open(relations_path, "w", encoding="utf-8") as fh:
        for rid, name in zip(kg.rel_ids, kg.rel_names):
            fh.write(json.dumps({"id": rid, "name": name}) + "\n")
    with open(triples_path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def write_corpus(corpus: Corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for c in corpus.chunks:
            fh.write(
                json.dumps(
                    {
                        "doc_id": c.doc_id,
                        "title": c.title,
                        "content": c.content,
                        "entities": list(c.entity_ids),
                    }
                )
                + "\n"
            )


# ----------------------------------------------------------------------
# entity-document incidence
# ----------------------------------------------------------------------


@dataclass
class EntityDocIndex:
    """Sparse binary incidence between entity positions and chunk indices."""

    rows: list  # per entity position: sorted chunk indices
    cols: list  # per chunk index: sorted entity positions
    doc_ids: list

    def doc_count(self, ent_pos: int) -> int:
        return len(self.rows[ent_pos])

    def contains(self, ent_pos: int, chunk_idx: int) -> bool:
        return chunk_idx in self.rows[ent_pos]

    def to_json(self) -> dict:
        return {
            "doc_ids": list(self.doc_ids),
            "rows": {str(i): list(r) for i, r in enumerate(self.rows) if r},
            "num_entities": len(self.rows),
        }

    @staticmethod
    def from_json(obj: dict) -> "EntityDocIndex":
        n = obj["num_entities"]
        rows = [[] for _ in range(n)]
        for k, v in obj["rows"].items():
            rows[int(k)] = sorted(int(c) for c in v)
        cols = [[] for _ in obj["doc_ids"]]
        for e, r in enumerate(rows):
            for c in r:
                cols[c].append(e)
        return EntityDocIndex(rows=rows, cols=[sorted(c) for c in cols], doc_ids=list(obj["doc_ids"]))


def build_entity_doc_index(kg: KnowledgeGraph, corpus: Corpus) -> EntityDocIndex:
    rows = [set() for _ in range(kg.num_entities)]
    cols = []
    for c_idx, chunk in enumerate(corpus.chunks):
        col = set()
        for eid in chunk.entity_ids:
            pos = kg.id2pos[eid]
            rows[pos].add(c_idx)
            col.add(pos)
        cols.append(sorted(col))
    return EntityDocIndex(
        rows=[sorted(r) for r in rows],
        cols=cols,
        doc_ids=[c.doc_id for c in corpus.chunks],
    )


# ----------------------------------------------------------------------
# normalized graph Laplacian
# ----------------------------------------------------------------------


def normalized_laplacian(kg: KnowledgeGraph) -> sp.csr_matrix:
    """L = I - D^(-1/2) A D^(-1/2) over the undirected, relation-collapsed
    simple graph (self-loops ignored).  Isolated nodes get L_ii = 1."""
    n = kg.num_entities
    pairs = set()
    for u, v in zip(kg.src, kg.dst):
        if u == v:
            continue
        pairs.add((min(int(u), int(v)), max(int(u), int(v))))
    deg = np.zeros(n, dtype=np.float64)
    for u, v in pairs:
        deg[u] += 1.0
        deg[v] += 1.0
    rows, cols, vals = list(range(n)), list(range(n)), [1.0] * n
    for u, v in sorted(pairs):
        w = -1.0 / np.sqrt(deg[u] * deg[v])
        rows.extend((u, v))
        cols.extend((v, u))
        vals.extend((w, w))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


# ----------------------------------------------------------------------
# text embeddings
# ----------------------------------------------------------------------


class EmbeddingProvider:
    """Deterministic text -> vector source.

    token-hash mode: lowercase, split on non-alphanumerics, hash each token
    to a signed bucket, accumulate, then L2-normalize (the all-zero vector
    stays all-zero).  file-backed mode: exact key lookup in a loaded table.
    """

    def __init__(self, dimension: int, mode: str = "token-hash", table=None, hash_seed: int = 0):
        if dimension < 1:
            raise ConfigError(f"embedding dimension must be positive, got {dimension}")
        if mode not in ("token-hash", "file-backed"):
            raise ConfigError(f"unknown embedding mode {mode!r}")
        if mode == "file-backed" and table is None:
            raise ConfigError("file-backed mode requires a key->vector table")
        self.mode = mode
        self.dimension = int(dimension)
        self.table = table
        self.hash_seed = int(hash_seed)
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        if self.mode == "file-backed":
            if text not in self.table:
                raise ValidationError(f"embedding table has no entry for key {text!r}")
            vec = np.asarray(self.table[text], dtype=np.float64)
            if vec.shape != (self.dimension,):
                raise ValidationError(
                    f"embedding for {text!r} has dimension {vec.shape}, expected ({self.dimension},)"
                )
        else:
            vec = np.zeros(self.dimension, dtype=np.float64)
            for token in tokenize(text):
                digest = hashlib.sha256(
                    self.hash_seed.to_bytes(8, "little") + token.encode("utf-8")
                ).digest()
                h = int.from_bytes(digest[:8], "little")
                bucket = h % self.dimension
                sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
                vec[bucket] += sign
            nrm = np.linalg.norm(vec)
            if nrm > 0:
                vec = vec / nrm
        self._cache[text] = vec
        return vec


def text_embed(provider: EmbeddingProvider, text: str) -> np.ndarray:
    return provider.embed(text)


def load_embeddings(path) -> dict[str, list[float]]:
    table = {}
    for lineno, obj in _parse_jsonl(path, ("key", "vector")):
        if obj["key"] in table:
            raise ValidationError(f"duplicate key {obj['key']!r}", path=str(path), line=lineno)
        table[obj["key"]] = obj["vector"]
    return table


# ----------------------------------------------------------------------
# labeled queries
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledQuery:
    """A retrieval query with its supervision: mentioned entities, the gold
    entity set, and the gold document ids."""

    text: str
    mentioned: tuple[int, ...]
    positives: tuple[int, ...]
    gold_docs: tuple[str, ...]
    hops: int


def load_queries(path, kg: KnowledgeGraph) -> list[LabeledQuery]:
    queries = []
    keys = ("text", "mentioned", "positives", "gold_docs", "hops")
    for lineno, obj in _parse_jsonl(path, keys):
        for key in ("mentioned", "positives"):
            for e in obj[key]:
                if e not in kg.id2pos:
                    raise ValidationError(
                        f"unknown entity id {e} in {key}", path=str(path), line=lineno
                    )
        queries.append(
            LabeledQuery(
                text=obj["text"],
                mentioned=tuple(obj["mentioned"]),
                positives=tuple(obj["positives"]),
                gold_docs=tuple(obj["gold_docs"]),
                hops=int(obj["hops"]),
            )
        )
    return queries


def write_queries(queries, path):
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(
                json.dumps(
                    {
                        "text": q.text,
                        "mentioned": list(q.mentioned),
                        "positives": list(q.positives),
                        "gold_docs": list(q.gold_docs),
                        "hops": q.hops,
                    }
                )
                + "\n"
            )


# ----------------------------------------------------------------------
# entity resolution
# ----------------------------------------------------------------------


def resolve_entities(kg: KnowledgeGraph, provider: EmbeddingProvider, tau: float = 0.8) -> KnowledgeGraph:
    """Add equivalence edges between entity pairs whose name embeddings have
    cosine similarity strictly above tau; original triples untouched."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"similarity threshold must lie in (0, 1], got {tau}")
    n = kg.num_entities
    if EQUIV_RELATION_NAME in kg.rel_names:
        eq_id = kg.rel_ids[kg.rel_names.index(EQUIV_RELATION_NAME)]
        relations = list(zip(kg.rel_ids, kg.rel_names))
    else:
        eq_id = (max(kg.rel_ids) + 1) if kg.rel_ids else 0
        relations = list(zip(kg.rel_ids, kg.rel_names)) + [(eq_id, EQUIV_RELATION_NAME)]

    emb = np.stack([provider.embed(name) for name in kg.ent_names]) if n else np.zeros((0, 1))
    norms = np.linalg.norm(emb, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = emb / safe[:, None]
    gram = unit @ unit.T

    existing = set(kg.triples)
    new_triples = list(kg.triples)
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0 or norms[j] == 0:
                continue
            if gram[i, j] > tau:
                a, b = sorted((kg.ent_ids[i], kg.ent_ids[j]))
                if (a, eq_id, b) not in existing:
                    existing.add((a, eq_id, b))
                    new_triples.append((a, eq_id, b))
    entities = list(zip(kg.ent_ids, kg.ent_names, kg.ent_domains))
    return KnowledgeGraph(entities, relations, new_triples)
