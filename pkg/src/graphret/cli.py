"""Command-line surface: synth, index, pretrain, finetune, retrieve, eval.

Every command is driven by one JSON config file and an optional seed
override; all outputs are bit-reproducible for a fixed (config, seed).

Exit codes: 0 success, 2 config or validation failure, 3 numeric failure,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    GenerationError,
    GraphretError,
    MissingArtifactError,
    NumericError,
    ValidationError,
)
from .harness import (
    build_report,
    generate_synthetic,
    random_baseline,
    rank_entities_by_scores,
    validate_planted_queries,
)
from .inference import InferenceConfig, RetrievalModels, retrieve, selection_for_query
from .kg import (
    EmbeddingProvider,
    EntityDocIndex,
    build_entity_doc_index,
    load_corpus,
    load_embeddings,
    load_kg,
    load_queries,
    resolve_entities,
    write_corpus,
    write_kg,
    write_queries,
)
from .numerics import SeededRng
from .pretrain import train
from .retriever import GraphCache, load_retriever, save_retriever
from .selector import finetune, load_selector, save_selector

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"config is missing paths.{what}")
    return value


def _require_file(path, what: str):
    if path is None:
        raise ConfigError(f"config is missing paths.{what}")
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found: {path}")
    return path


def _out_dir(cfg: RunConfig, override) -> Path:
    out = override or cfg.paths.out_dir
    if out is None:
        raise ConfigError("no output directory (set paths.out_dir or pass --out)")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _provider(cfg: RunConfig) -> EmbeddingProvider:
    if cfg.paths.embeddings is not None:
        table = load_embeddings(_require_file(cfg.paths.embeddings, "embeddings"))
        return EmbeddingProvider(cfg.model.text_dim, mode="file-backed", table=table)
    return EmbeddingProvider(cfg.model.text_dim)


def _load_graph(cfg: RunConfig):
    return load_kg(
        _require_file(cfg.paths.triples, "triples"),
        _require_file(cfg.paths.entities, "entities"),
        _require_file(cfg.paths.relations, "relations"),
    )


def _load_models(cfg: RunConfig) -> RetrievalModels:
    kg = _load_graph(cfg)
    corpus = load_corpus(_require_file(cfg.paths.corpus, "corpus"), kg)
    if cfg.paths.index is not None:
        blob = json.loads(Path(_require_file(cfg.paths.index, "index")).read_text())
        index = EntityDocIndex.from_json(blob)
    else:
        index = build_entity_doc_index(kg, corpus)
    retriever = load_retriever(_require_file(cfg.paths.retriever_checkpoint, "retriever_checkpoint"))
    selector, _ = load_selector(_require_file(cfg.paths.selector_checkpoint, "selector_checkpoint"))
    cache = GraphCache(kg, _provider(cfg))
    return RetrievalModels(cache, corpus, index, retriever, selector)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    kg, corpus, queries = generate_synthetic(cfg.synth)
    violations = validate_planted_queries(kg, queries)
    write_kg(kg, out / "triples.tsv", out / "entities.jsonl", out / "relations.jsonl")
    write_corpus(corpus, out / "corpus.jsonl")
    write_queries(queries, out / "queries.jsonl")
    print(
        f"entities={kg.num_entities} relations={kg.num_relations} "
        f"triples={kg.num_triples} chunks={len(corpus)} queries={len(queries)} "
        f"violations={violations}"
    )
    return EXIT_OK if violations == 0 else EXIT_CONFIG


def cmd_index(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    kg = _load_graph(cfg)
    corpus = load_corpus(_require_file(cfg.paths.corpus, "corpus"), kg)
    resolved = resolve_entities(kg, _provider(cfg), tau=cfg.index.tau)
    index = build_entity_doc_index(resolved, corpus)
    write_kg(resolved, out / "triples.tsv", out / "entities.jsonl", out / "relations.jsonl")
    write_corpus(corpus, out / "corpus.jsonl")
    (out / "index.json").write_text(json.dumps(index.to_json(), sort_keys=True))
    added = resolved.num_triples - kg.num_triples
    print(f"entities={resolved.num_entities} triples={resolved.num_triples} equivalence_edges={added}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    kg = _load_graph(cfg)
    provider = _provider(cfg)
    rng = SeededRng(cfg.seed)
    params, log = train(kg, provider, cfg.model.hidden_dim, cfg.model.layers, cfg.train, rng)
    save_retriever(out / "retriever.ckpt", params)
    with open(out / "pretrain.log", "w", encoding="utf-8") as fh:
        for line in log.lines():
            fh.write(line + "\n")
        fh.write(json.dumps(log.summary(), sort_keys=True) + "\n")
    summary = log.summary()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    kg = _load_graph(cfg)
    provider = _provider(cfg)
    queries = load_queries(_require_file(cfg.paths.queries, "queries"), kg)
    frozen = load_retriever(_require_file(cfg.paths.retriever_checkpoint, "retriever_checkpoint"))
    cache = GraphCache(kg, provider)
    rng = SeededRng(cfg.seed)
    selector, log = finetune(
        cache,
        frozen,
        queries,
        cfg.finetune,
        rng,
        prompt_dim=cfg.model.prompt_dim,
        selector_dim=cfg.model.selector_dim,
    )
    save_selector(out / "selector.ckpt", selector, backbone_layers=frozen.num_layers)
    with open(out / "finetune.log", "w", encoding="utf-8") as fh:
        for line in log.lines():
            fh.write(line + "\n")
        fh.write(json.dumps(log.summary(), sort_keys=True) + "\n")
    print(json.dumps(log.summary(), sort_keys=True))
    return EXIT_OK


def cmd_retrieve(cfg: RunConfig, args) -> int:
    models = _load_models(cfg)
    if args.query is None and args.queries is None:
        raise ConfigError("retrieve needs --query or --queries")
    if args.query is not None and args.queries is not None:
        raise ConfigError("pass only one of --query / --queries")
    out = Path(args.out or cfg.paths.out_dir) if (args.out or cfg.paths.out_dir) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if args.query is not None:
        bundle = retrieve(models, args.query, cfg.inference)
        sys.stdout.write(bundle.prompt_text)
        if out is not None:
            (out / "bundle.json").write_text(json.dumps(bundle.to_json(), sort_keys=True))
        return EXIT_OK

    queries = load_queries(_require_file(args.queries, "queries"), models.cache.kg)
    lines = []
    for q in queries:
        bundle = retrieve(models, q.text, cfg.inference, mentioned=q.mentioned)
        lines.append(json.dumps(bundle.to_json(), sort_keys=True))
    for line in lines:
        print(line)
    if out is not None:
        (out / "bundles.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    models = _load_models(cfg)
    kg = models.cache.kg
    queries = load_queries(_require_file(cfg.paths.queries, "queries"), kg)
    entity_rankings = []
    doc_rankings = []
    for q in queries:
        selection = selection_for_query(models, q.text, cfg.inference, mentioned=q.mentioned)
        entity_rankings.append(rank_entities_by_scores(kg, selection.gates))
        bundle = retrieve(models, q.text, cfg.inference, mentioned=q.mentioned)
        doc_rankings.append([d.doc_id for d in bundle.docs])
    pipeline = build_report(entity_rankings, doc_rankings, queries)
    baseline = random_baseline(
        kg, [c.doc_id for c in models.corpus.chunks], queries, SeededRng(cfg.seed).substream("baseline")
    )
    report = {
        "num_queries": len(queries),
        "pipeline": pipeline.to_json(),
        "random_baseline": baseline.to_json(),
    }
    blob = json.dumps(report, sort_keys=True)
    print(blob)
    if args.out or cfg.paths.out_dir:
        out = _out_dir(cfg, args.out)
        (out / "metrics.json").write_text(blob)
    return EXIT_OK


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphret",
        description="Knowledge-graph retrieval: train, select subgraphs, build prompts.",
    )
    parser.add_argument("command", choices=["synth", "index", "pretrain", "finetune", "retrieve", "eval"])
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override paths.out_dir")
    parser.add_argument("--query", default=None, help="retrieve: a single query string")
    parser.add_argument("--queries", default=None, help="retrieve: a queries.jsonl file")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "index": cmd_index,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code != 0 else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.synth.seed = args.seed
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValidationError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except GraphretError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
