"""
CLANN Reranker - Main Application
Command-line entry point for training, reranking, scoring, grid search and
synthetic data generation.
"""
import argparse
import logging
import os
import queue
import sys
from logging.handlers import QueueHandler, QueueListener, RotatingFileHandler
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from core import FeatureContext, RerankPipeline, RunManifest, load_model, rerank, save_model
from modules.config_enhanced import (
    expand_grid, format_cell_tuple, get_conf, get_feature_config, get_train_config, load_config,
    load_grid, load_synthetic_spec,
)
from modules.data import generate_synthetic, expected_relevance_rate, load_dataset, load_pairs, write_dataset
from modules.embeddings import EmbeddingTable, load_embedding_table
from modules.error_handler import ConfigError, ValidationError, get_error_stats, with_exit_codes
from modules.json_helpers import write_json
from modules.metrics import emit_predictions, evaluate, score_predictions, write_gold
from modules.train import grid_search

# ============================================================================
# LOGGING CONFIGURATION (NON-BLOCKING)
# ============================================================================

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'

logger = logging.getLogger('main')


def setup_logging(level: str = "INFO", log_dir: str = "logs") -> QueueListener:
    """
    Route every logger through a queue to a rotating file and the console.

    Returns the started listener; stop it before exiting to flush.
    """
    os.makedirs(log_dir, exist_ok=True)

    log_queue = queue.Queue(-1)

    file_handler = RotatingFileHandler(os.path.join(log_dir, 'clann.log'),
                                       maxBytes=1024 * 1024, backupCount=3)
    console_handler = logging.StreamHandler()

    formatter = logging.Formatter(LOG_FORMAT)
    file_handler.setFormatter(formatter)
    console_handler.setFormatter(formatter)

    listener = QueueListener(log_queue, file_handler, console_handler)

    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    # Remove default handlers to avoid duplication
    root_logger.handlers = []
    root_logger.addHandler(QueueHandler(log_queue))

    listener.start()
    return listener


# ============================================================================
# SHARED HELPERS
# ============================================================================

def parse_embedding_flags(flags: Optional[Sequence[str]], config: Dict) -> List[EmbeddingTable]:
    """
    Embedding tables from repeated name=path flags, else from the config's
    embeddings section (name: path). Flag order fixes the cos.* feature order.
    """
    pairs = []
    if flags:
        for flag in flags:
            name, sep, path = flag.partition('=')
            if not sep or not name or not path:
                raise ConfigError(f"--embeddings expects name=path, got '{flag}'")
            pairs.append((name, path))
    else:
        pairs = list((config.get('embeddings') or {}).items())

    names = [name for name, _ in pairs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate embedding table names {names}")
    tables = [load_embedding_table(path, name=name) for name, path in pairs]
    for table in tables:
        logger.info(f"Embedding table '{table.name}': {len(table)} tokens, dim {table.dimension}")
    return tables


MODE_ALIASES = {'fnn': 'fnn', 'clann': 'clann_unsup', 'semisup': 'clann_semisup'}


def train_overrides(args) -> Dict:
    return {
        'mode': MODE_ALIASES[args.mode] if args.mode else None,
        'seed': args.seed,
    }


def build_context(args, config: Dict, dataset) -> FeatureContext:
    tables = parse_embedding_flags(args.embeddings, config)
    mode = get_conf(config, 'features', 'mode')
    if mode is None and dataset.uses_vectors() and not tables:
        mode = 'vector'
        logger.info("Dataset carries precomputed question vectors; using vector features")
    return FeatureContext.build(tables, get_feature_config(config, mode))


def start_manifest(command: str, args, config: Dict) -> RunManifest:
    manifest = RunManifest(command=command, config=dict(config), seed=getattr(args, 'seed', None))
    for attr in ('config', 'data', 'model', 'queries', 'predictions', 'gold', 'grid', 'spec', 'vectors'):
        manifest.add_input(getattr(args, attr, None))
    for flag in getattr(args, 'embeddings', None) or []:
        manifest.add_input(flag.partition('=')[2])
    data = getattr(args, 'data', None)
    if data and Path(data).is_dir():
        for path in sorted(Path(data).iterdir()):
            manifest.add_input(str(path))
    return manifest


def print_scores(rows: Dict[str, Dict[str, float]], skipped: Dict[str, str]):
    """Presentation table: metrics x100, 2 decimals."""
    width = max(len(name) for name in rows) if rows else 8
    print(f"{'':<{width}}  {'MAP':>7}  {'MRR':>7}  {'AvgRec':>7}  queries")
    for name, pct in rows.items():
        print(f"{name:<{width}}  {pct['MAP']:>7.2f}  {pct['MRR']:>7.2f}  {pct['AvgRec']:>7.2f}  {skipped[name]}")


# ============================================================================
# COMMANDS
# ============================================================================

@with_exit_codes
def cmd_train(args) -> int:
    config = load_config(args.config)
    train_config = get_train_config(config, args.profile, train_overrides(args))
    dataset = load_dataset(args.data)
    context = build_context(args, config, dataset)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest('train', args, config)
    manifest.seed = train_config.seed
    manifest.config = {**config, 'train': train_config.model_dump()}

    outcome = RerankPipeline(train_config, context).fit(dataset, log_path=str(out / 'train_log.jsonl'))

    model_path = out / 'model.json'
    report_path = out / 'report.json'
    manifest.add_artifact('model', str(model_path))
    manifest.add_artifact('training_log', str(out / 'train_log.jsonl'))
    manifest.add_artifact('report', str(report_path))
    manifest.finish()
    save_model(str(model_path), outcome.params, context, train_config,
               dataset.source_language, dataset.target_language, manifest)
    write_json(str(report_path), {**outcome.summary(), 'run_manifest': manifest.to_dict()})
    manifest.write(str(out / 'run_manifest.json'))

    rows = {name: r.as_percent() for name, r in outcome.evaluations.items()}
    print_scores(rows, {name: f"{r.scored_queries} ({r.skipped_queries} skipped)"
                        for name, r in outcome.evaluations.items()})
    if outcome.report.epochs and outcome.report.epochs[-1].probe_accuracy is not None:
        print(f"discriminator probe accuracy: {outcome.report.epochs[-1].probe_accuracy:.4f}")
    if outcome.language_probe is not None:
        print(f"language probe accuracy: {outcome.language_probe:.4f}")
    return 0


@with_exit_codes
def cmd_rerank(args) -> int:
    config = load_config(args.config)
    depth = args.depth or get_conf(config, 'evaluation', 'depth', 10)
    tables = parse_embedding_flags(args.embeddings, config)
    model = load_model(args.model, tables)
    vectors = load_embedding_table(args.vectors, name='vectors') if args.vectors else None
    if model.context.config.mode == 'vector' and vectors is None:
        raise ValidationError("model uses precomputed vectors; pass --vectors")

    pairs = load_pairs(args.queries, 'rerank', model.source_language, labeled=None, vectors=vectors)
    queries, pool = rerank(model.params, model.context, pairs, depth, debug_trace=args.debug_trace)
    emit_predictions(queries, args.out)

    manifest = start_manifest('rerank', args, config)
    manifest.add_artifact('predictions', args.out)

    if args.gold_out:
        unlabeled = [p.key for p in pairs if p.label is None]
        if unlabeled:
            raise ValidationError(f"--gold-out needs labels; pair {unlabeled[0]} has none")
        write_gold(args.gold_out, ((p.original.id, p.retrieved.id, p.label) for p in pairs))
        manifest.add_artifact('gold', args.gold_out)
        if pool.labeled:
            result = evaluate(queries)
            logger.info(f"In-process evaluation: {result.as_percent()}")

    manifest.write(str(Path(args.out).with_suffix('.manifest.json')))
    print(f"Wrote {len(pairs)} predictions for {len(queries)} queries to {args.out}")
    return 0


@with_exit_codes
def cmd_score(args) -> int:
    depth = args.depth or get_conf(load_config(args.config), 'evaluation', 'depth', 10)
    result = score_predictions(args.predictions, args.gold, depth)
    print_scores({'scores': result.as_percent()},
                 {'scores': f"{result.scored_queries} ({result.skipped_queries} skipped)"})
    return 0


@with_exit_codes
def cmd_gridsearch(args) -> int:
    config = load_config(args.config)
    base = get_train_config(config, args.profile, train_overrides(args))
    dataset = load_dataset(args.data)
    context = build_context(args, config, dataset)
    cells = expand_grid(load_grid(args.grid))
    logger.info(f"Grid search over {len(cells)} cells")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest('gridsearch', args, config)
    manifest.seed = base.seed

    pools = RerankPipeline(base, context).prepare(dataset)
    result = grid_search(cells, base, pools.source, pools.unlabeled, pools.labeled_target, pools.dev,
                         cell_dir=str(out), threads=args.threads)

    table_path = out / 'grid_table.tsv'
    with open(table_path, 'w', encoding='utf-8', newline='\n') as f:
        f.write("cell\tb, d, h, f, l2\tdev_map\tdev_mrr\tbest_epoch\tepochs_run\n")
        for cell in result.cells:
            f.write(f"{cell.index}\t{format_cell_tuple(cell.overrides)}\t{cell.dev_map!r}\t"
                    f"{cell.dev_mrr!r}\t{cell.best_epoch}\t{cell.epochs_run}\n")

    best_path = out / 'best_model.json'
    manifest.add_artifact('grid_table', str(table_path))
    manifest.add_artifact('best_model', str(best_path))
    manifest.finish()
    save_model(str(best_path), result.best.params, context, result.best_config,
               dataset.source_language, dataset.target_language, manifest)
    write_json(str(out / 'grid_results.json'), {
        'cells': result.table(),
        'best_index': result.best.index,
        'best_config': result.best_config.model_dump(),
    })
    manifest.write(str(out / 'run_manifest.json'))

    for cell in result.cells:
        marker = '*' if cell.index == result.best.index else ' '
        print(f"{marker} {cell.index:3d}  ({format_cell_tuple(cell.overrides)})  "
              f"MAP {100 * cell.dev_map:.2f}  MRR {100 * cell.dev_mrr:.2f}")
    return 0


@with_exit_codes
def cmd_synth(args) -> int:
    spec = load_synthetic_spec(args.spec, seed=args.seed)
    rate = expected_relevance_rate(spec.relevance_threshold, spec.latent_dim)
    logger.info(f"Expected relevance rate for independent latents: {rate:.4f}")

    dataset, _ = generate_synthetic(spec)
    manifest_path = write_dataset(dataset, args.out)

    manifest = start_manifest('synth', args, {'synthetic': spec.model_dump()})
    manifest.seed = spec.seed
    manifest.add_artifact('dataset', manifest_path)
    manifest.write(str(Path(args.out) / 'run_manifest.json'))
    print(f"Synthetic dataset written to {args.out}: {dataset.counts}")
    return 0


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def _add_training_flags(p: argparse.ArgumentParser):
    p.add_argument('--config', default=None, help="YAML run config (default ./config/config.yaml)")
    p.add_argument('--profile', choices=['full', 'quickstart'], default=None)
    p.add_argument('--data', required=True, help="dataset manifest file or directory")
    p.add_argument('--out', required=True, help="output directory")
    p.add_argument('--embeddings', action='append', metavar='NAME=PATH')
    p.add_argument('--mode', choices=sorted(MODE_ALIASES))
    p.add_argument('--seed', type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='clann', description="Cross-language question reranker")
    parser.add_argument('--log-level', default=None, help="DEBUG, INFO, WARNING ...")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help="train a model")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('rerank', help="score and rank candidate lists")
    p.add_argument('--config', default=None)
    p.add_argument('--model', required=True)
    p.add_argument('--queries', required=True, help="JSONL pair file")
    p.add_argument('--out', required=True, help="prediction file")
    p.add_argument('--embeddings', action='append', metavar='NAME=PATH')
    p.add_argument('--vectors', default=None, help="precomputed question vectors (vector-mode models)")
    p.add_argument('--gold-out', default=None, help="also write the gold file for labeled queries")
    p.add_argument('--debug-trace', action='store_true', help="log per-candidate forward traces")
    p.add_argument('--depth', type=int, default=None, help="evaluation depth (default: evaluation.depth, 10)")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser('score', help="evaluate a prediction file")
    p.add_argument('--config', default=None)
    p.add_argument('--predictions', required=True)
    p.add_argument('--gold', required=True)
    p.add_argument('--depth', type=int, default=None, help="evaluation depth (default: evaluation.depth, 10)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser('gridsearch', help="train one model per grid cell")
    _add_training_flags(p)
    p.add_argument('--grid', default=None, help="YAML grid (default: the full 324-cell grid)")
    p.add_argument('--threads', type=int, default=1)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser('synth', help="generate a synthetic dataset")
    p.add_argument('--spec', default=None, help="YAML synthetic spec")
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int, default=None)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = args.log_level
    if level is None:
        try:
            level = get_conf(load_config(getattr(args, 'config', None)), 'logging', 'level', 'INFO')
        except ConfigError:
            level = 'INFO'
    listener = setup_logging(level)
    try:
        code = args.func(args)
        if code:
            logger.debug(f"Error stats: {get_error_stats()}")
        return code
    finally:
        listener.stop()


if __name__ == "__main__":
    sys.exit(main())
