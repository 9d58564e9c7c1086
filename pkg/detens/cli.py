import argparse
import json
import logging
import math
import sys
from pathlib import Path

from detens.config import Config, PipelineConfig, default_log_level
from detens.core import VOC_CLASSES, ModelSpec
from detens.ensemble import (Ensemble, ModelSet, detections_by_class, nms, read_detections, score_proposals,
                             write_detections, write_voc_results)
from detens.errors import DetensError, ParameterError
from detens.evaluation import Evaluator, parse_json, render_json, render_table, write_pr_curves
from detens.ingest.augment import (drop_images_without_trainable, filter_small_objects, map_coco_labels,
                                   merge_manifests, sample_manifest_negatives, summarize_manifest)
from detens.ingest.coco import CocoAnnotation
from detens.ingest.features import concatenate_stores, load_feature_store, write_feature_store
from detens.ingest.proposals import read_proposals, write_proposals
from detens.ingest.voc import VocAnnotation
from detens.learn.persist import ModelDirectory
from detens.learn.pools import build_training_pools
from detens.learn.regression import BBoxRegressorTrainer, train_all_regressors
from detens.learn.svm import SvmTrainer, train_all_classes
from detens.storage import Storage
from detens.synthetic import SyntheticSpec, gen_synthetic

LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']


def setup_logging(log_level):
    """
    Configures logging based on the specified log level.
    """
    numeric_level = getattr(logging, log_level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f'Invalid log level: {log_level}')

    logging.basicConfig(level=numeric_level, format=Config.LOG_FORMAT)
    logging.getLogger().setLevel(numeric_level)


def _parents():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--log', dest='log_level', default=None, choices=LOG_LEVELS,
                        help=f'Set the logging level (default: ${Config.LOG_ENV_VAR} or {Config.LOG_LEVEL})')
    common.add_argument('--config', dest='config_file', help='JSON file of option values; flags win')

    output = argparse.ArgumentParser(add_help=False)
    output.add_argument('-o', '--output', dest='output', help='Output file or directory')

    manifest = argparse.ArgumentParser(add_help=False)
    manifest.add_argument('--manifest', dest='manifest', help='Manifest JSON-lines file')

    jobs = argparse.ArgumentParser(add_help=False)
    jobs.add_argument('--jobs', dest='jobs', type=int, default=Config.JOBS, help='Worker threads')

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument('--proposals', dest='proposals', help='Proposals JSON-lines file')
    training.add_argument('--features', dest='features', nargs='+', default=[],
                          help='DEFV feature file(s); several are concatenated')
    training.add_argument('--model-name', dest='model_name', help='Network name stored with the models')
    training.add_argument('--feature-dim', dest='feature_dim', type=int,
                          help='Expected feature dimension of a single feature file')
    training.add_argument('--training-set', dest='training_set', help='Name of the training set, e.g. VOC2012')
    training.add_argument('--classes', dest='classes', nargs='+', help='Classes to train (default: all)')
    training.add_argument('--neg-iou', dest='neg_iou', type=float, default=Config.SVM_NEGATIVE_IOU)
    training.add_argument('--match-iou', dest='match_iou', type=float, default=Config.BBOX_MATCH_IOU)
    return common, output, manifest, jobs, training


def build_parser():
    """
    Returns the argument parser and its subparsers by command name.
    """
    common, output, manifest, jobs, training = _parents()
    parser = argparse.ArgumentParser(prog='detens', description='Detection ensemble pipeline toolkit.')
    commands = parser.add_subparsers(dest='command', required=True)
    sub = {}

    def add(name, help_text, *parents):
        sub[name] = commands.add_parser(name, help=help_text, parents=[common, *parents])
        return sub[name]

    p = add('convert-voc', 'Parse VOC annotation XML files into a manifest', output)
    p.add_argument('inputs', nargs='*', help='Annotation files or directories of them')
    p.add_argument('--name', dest='name', help='Manifest name (default: VOC2012)')
    p.add_argument('--source', dest='source', help='Dataset source tag (default: voc2012)')
    p.add_argument('--split', dest='split', help='Split tag (default: train)')

    p = add('convert-coco', 'Parse a COCO instances JSON file into a manifest', output)
    p.add_argument('inputs', nargs='*', help='COCO instances file')
    p.add_argument('--name', dest='name', help='Manifest name (default: COCO2014)')
    p.add_argument('--split', dest='split', help='Split tag (default: trainval)')

    p = add('map-classes', 'Map COCO categories onto the VOC classes', output, manifest)
    p.add_argument('--drop-empty', dest='drop_empty', action='store_true',
                   help='Drop images left without SVM-trainable boxes')

    p = add('filter-small', 'Remove ground-truth boxes with a side below --min-side', output, manifest)
    p.add_argument('--min-side', dest='min_side', type=float, default=Config.MIN_OBJECT_SIDE)
    p.add_argument('--sources', dest='sources', nargs='+', default=list(Config.SMALL_OBJECT_SOURCES),
                   help='Dataset sources to filter (default: coco2014)')
    p.add_argument('--drop-empty', dest='drop_empty', action='store_true',
                   help='Drop images left without SVM-trainable boxes')

    p = add('sample-negatives', 'Add sampled background boxes to every image', output, manifest)
    p.add_argument('--per-gt', dest='per_gt', type=int, default=Config.NEGATIVES_PER_GT)
    p.add_argument('--max-attempts', dest='max_attempts', type=int, default=Config.NEGATIVE_MAX_ATTEMPTS)
    p.add_argument('--seed', dest='seed', type=int, default=Config.SEED)

    p = add('merge', 'Concatenate manifests with disjoint image ids', output)
    p.add_argument('inputs', nargs='*', help='Manifest files, in order')
    p.add_argument('--name', dest='name', help='Merged manifest name (default: names joined by +)')

    p = add('stats', 'Print image and box counts of manifests', manifest)
    p.add_argument('inputs', nargs='*', help='Manifest files')

    p = add('gen-synthetic', 'Generate a synthetic dataset with oracle features', output)
    p.add_argument('--n-images', dest='n_images', type=int, default=Config.SYNTHETIC_IMAGES)
    p.add_argument('--classes', dest='classes', nargs='+', help='VOC classes to draw labels from')
    p.add_argument('--width', dest='width', type=int, default=Config.SYNTHETIC_WIDTH)
    p.add_argument('--height', dest='height', type=int, default=Config.SYNTHETIC_HEIGHT)
    p.add_argument('--min-boxes', dest='min_boxes', type=int, default=1)
    p.add_argument('--max-boxes', dest='max_boxes', type=int, default=3)
    p.add_argument('--sigma', dest='sigma', type=float, default=0.0, help='Feature noise')
    p.add_argument('--feature-scale', dest='feature_scale', type=float, default=Config.SYNTHETIC_FEATURE_SCALE,
                   help='Factor applied to every oracle feature')
    p.add_argument('--pseudo-models', dest='pseudo_models', type=int, default=Config.SYNTHETIC_MODELS)
    p.add_argument('--seed', dest='seed', type=int, default=Config.SEED)

    p = add('train-svm', 'Train per-class SVMs with hard-negative mining', output, manifest, jobs, training)
    p.add_argument('--c-param', dest='c_param', type=float, default=Config.SVM_C)
    p.add_argument('--rounds', dest='rounds', type=int, default=Config.SVM_MINING_ROUNDS)
    p.add_argument('--epochs', dest='epochs', type=int, default=Config.SVM_EPOCHS)
    p.add_argument('--cache-cap', dest='cache_cap', type=int, default=Config.SVM_CACHE_CAP)
    p.add_argument('--seed', dest='seed', type=int, default=Config.SEED)

    p = add('train-bbox', 'Train per-class bounding-box regressors', output, manifest, jobs, training)
    p.add_argument('--ridge-lambda', dest='ridge_lambda', type=float, default=Config.RIDGE_LAMBDA)

    p = add('score', 'Score proposals with one network\'s SVMs', output)
    p.add_argument('--models', dest='models', help='Model directory')
    p.add_argument('--features', dest='features', nargs='+', default=[], help='DEFV feature file')
    p.add_argument('--proposals', dest='proposals', help='Proposals JSON-lines file')

    p = add('ensemble', 'Average several networks and run NMS', output, manifest, jobs)
    p.add_argument('--member', dest='members', nargs=2, action='append', default=[],
                   metavar=('MODEL_DIR', 'FEATURES'), help='One network: its model directory and feature file')
    p.add_argument('--proposals', dest='proposals', help='Proposals JSON-lines file')
    p.add_argument('--nms-threshold', dest='nms_threshold', type=float, default=Config.NMS_THRESHOLD)
    p.add_argument('--score-floor', dest='score_floor', type=float, default=Config.SCORE_FLOOR)
    p.add_argument('--nms-first', dest='nms_first', action='store_true',
                   help='Suppress on proposal boxes before averaging regressed boxes')
    p.add_argument('--voc-dir', dest='voc_dir', help='Also write VOC per-class result files here')

    p = add('nms', 'Apply non-maximum suppression to a detections file', output)
    p.add_argument('--dets', dest='dets', help='Detections JSON-lines file')
    p.add_argument('--nms-threshold', dest='nms_threshold', type=float, default=Config.NMS_THRESHOLD)

    p = add('eval', 'Evaluate detections against ground truth', output, jobs)
    p.add_argument('--dets', dest='dets', help='Detections JSON-lines file')
    p.add_argument('--gt', dest='gt', help='Ground-truth manifest')
    p.add_argument('--iou-threshold', dest='iou_threshold', type=float, default=Config.EVAL_IOU)
    p.add_argument('--ap-method', dest='ap_method', default=Config.AP_METHOD, choices=Config.AP_METHODS)
    p.add_argument('--name', dest='name', help='Row label in the report')

    p = add('report', 'Combine evaluation results into one table', output)
    p.add_argument('inputs', nargs='*', help='Result JSON files written by eval')
    return parser, sub


REQUIRED = {
    'convert-voc': ('inputs', 'output'),
    'convert-coco': ('inputs', 'output'),
    'map-classes': ('manifest', 'output'),
    'filter-small': ('manifest', 'output'),
    'sample-negatives': ('manifest', 'output'),
    'merge': ('inputs', 'output'),
    'stats': (),
    'gen-synthetic': ('output',),
    'train-svm': ('manifest', 'proposals', 'features', 'output'),
    'train-bbox': ('manifest', 'proposals', 'features', 'output'),
    'score': ('models', 'features', 'proposals', 'output'),
    'ensemble': ('members', 'proposals', 'output'),
    'nms': ('dets', 'output'),
    'eval': ('dets', 'gt'),
    'report': ('inputs',),
}


def convert_voc(config, storage):
    paths = _expand(config.inputs, '*.xml')
    parser = VocAnnotation(storage, config.source or 'voc2012', config.split or 'train')
    manifest = parser.load_many(paths, config.name or 'VOC2012')
    storage.write_manifest(config.output, manifest)


def convert_coco(config, storage):
    if len(config.inputs) != 1:
        raise ParameterError(f"convert-coco takes one instances file, got {len(config.inputs)}")
    manifest = CocoAnnotation(storage, split=config.split or 'trainval').load(config.inputs[0],
                                                                            config.name or 'COCO2014')
    storage.write_manifest(config.output, manifest)


def map_classes(config, storage):
    manifest = map_coco_labels(storage.read_manifest(config.manifest))
    if config.drop_empty:
        manifest = drop_images_without_trainable(manifest)
    _log_summary(manifest)
    storage.write_manifest(config.output, manifest)


def filter_small(config, storage):
    manifest, _ = filter_small_objects(storage.read_manifest(config.manifest), config.min_side, config.sources)
    if config.drop_empty:
        manifest = drop_images_without_trainable(manifest)
    _log_summary(manifest)
    storage.write_manifest(config.output, manifest)


def sample_negatives(config, storage):
    manifest = sample_manifest_negatives(storage.read_manifest(config.manifest), config.per_gt, config.seed,
                                         config.max_attempts)
    storage.write_manifest(config.output, manifest)


def merge(config, storage):
    manifests = [storage.read_manifest(path) for path in config.inputs]
    merged = merge_manifests(manifests, config.name)
    _log_summary(merged)
    storage.write_manifest(config.output, merged)


def stats(config, storage):
    paths = list(config.inputs) + ([config.manifest] if config.manifest else [])
    if not paths:
        raise ParameterError("stats needs at least one manifest")
    summaries = [summarize_manifest(storage.read_manifest(path)).to_dict() for path in paths]
    print(json.dumps(summaries if len(summaries) > 1 else summaries[0], indent=2))


def synthetic(config, storage):
    spec = SyntheticSpec(n_images=config.n_images, width=config.width, height=config.height,
                         classes=tuple(config.classes) if config.classes else SyntheticSpec.classes,
                         min_boxes=config.min_boxes, max_boxes=config.max_boxes, sigma=config.sigma,
                         feature_scale=config.feature_scale,
                         seed=config.seed, pseudo_models=config.pseudo_models)
    manifest, proposals, stores = gen_synthetic(spec)
    out = storage.resolve(config.output)
    storage.write_manifest(out / 'manifest.jsonl', manifest)
    write_proposals(out / 'proposals.jsonl', proposals, storage)
    for name, store in stores.items():
        write_feature_store(out / 'features' / f'{name}.defv', store, storage)


def train_svm(config, storage):
    manifest, proposals, store, model_name = _training_inputs(config, storage)
    pools = build_training_pools(manifest, proposals, store, config.classes, config.neg_iou, config.match_iou)
    trainer = SvmTrainer(c_param=config.c_param, epochs=config.epochs, seed=config.seed)
    models = train_all_classes(trainer, pools, config.rounds, config.cache_cap, model_name, config.jobs)
    ModelDirectory(config.output, storage).save_svms(models)


def train_bbox(config, storage):
    manifest, proposals, store, model_name = _training_inputs(config, storage)
    pools = build_training_pools(manifest, proposals, store, config.classes, config.neg_iou, config.match_iou)
    regressors = train_all_regressors(BBoxRegressorTrainer(config.ridge_lambda), pools, model_name, config.jobs)
    ModelDirectory(config.output, storage).save_regressors(regressors)


def score(config, storage):
    svms = ModelDirectory(config.models, storage).load_svms()
    store = load_feature_store(config.features[0], storage=storage)
    scored = score_proposals(svms, store, read_proposals(config.proposals, storage))
    storage.write_jsonl(config.output, ({
        "image_id": box.image_id,
        "box_index": box.box_index,
        "provenance": box.provenance,
        "scores": {name: (None if math.isnan(value) else value) for name, value in zip(VOC_CLASSES, box.scores)},
    } for box in scored))


def ensemble(config, storage):
    manifest = storage.read_manifest(config.manifest) if config.manifest else None
    proposals = read_proposals(config.proposals, storage, manifest)
    members = []
    for model_dir, features in config.members:
        directory = ModelDirectory(model_dir, storage)
        members.append(ModelSet(Path(model_dir).name, directory.load_svms(), directory.load_regressors(),
                                load_feature_store(features, storage=storage)))
    sizes = {record.image_id: (record.width, record.height) for record in manifest} if manifest else None
    runner = Ensemble(members, config.nms_threshold, config.score_floor, config.nms_first, config.jobs)
    detections = runner.run(proposals, sizes)
    write_detections(config.output, detections, storage)
    if config.voc_dir:
        write_voc_results(config.voc_dir, detections, storage)


def suppress(config, storage):
    detections = read_detections(config.dets, storage)
    groups = {}
    for detection in detections:
        groups.setdefault((detection.image_id, detection.class_name), []).append(detection)
    kept = [d for group in groups.values() for d in nms(group, config.nms_threshold)]
    logging.info(f"NMS kept {len(kept)} of {len(detections)} detections over "
                 f"{len(detections_by_class(detections))} classes")
    write_detections(config.output, kept, storage)


def evaluate(config, storage):
    detections = read_detections(config.dets, storage)
    manifest = storage.read_manifest(config.gt)
    evaluator = Evaluator(config.iou_threshold, config.ap_method, config.jobs)
    result = evaluator.evaluate(detections, manifest, config.name or Path(config.dets).stem)
    _emit_report([result], config.output, storage)
    if config.output:
        write_pr_curves(storage.resolve(config.output) / 'pr', result, storage)


def report(config, storage):
    results = []
    for path in config.inputs:
        results += parse_json(storage.read_bytes(path).decode('utf-8'))
    _emit_report(results, config.output, storage)


COMMANDS = {
    'convert-voc': convert_voc,
    'convert-coco': convert_coco,
    'map-classes': map_classes,
    'filter-small': filter_small,
    'sample-negatives': sample_negatives,
    'merge': merge,
    'stats': stats,
    'gen-synthetic': synthetic,
    'train-svm': train_svm,
    'train-bbox': train_bbox,
    'score': score,
    'ensemble': ensemble,
    'nms': suppress,
    'eval': evaluate,
    'report': report,
}


def _expand(paths, pattern):
    expanded = []
    for path in paths:
        path = Path(path)
        expanded += sorted(path.glob(pattern)) if path.is_dir() else [path]
    return expanded


def _log_summary(manifest):
    summary = summarize_manifest(manifest)
    logging.info(f"{summary.name}: {summary.images} images, {summary.images_with_trainable} with trainable "
                 f"boxes, {summary.trainable} trainable and {summary.unmapped} unmapped boxes")


def _training_inputs(config, storage):
    manifest = storage.read_manifest(config.manifest)
    proposals = read_proposals(config.proposals, storage, manifest)
    expected = None
    if config.feature_dim is not None and len(config.features) == 1:
        expected = ModelSpec(config.model_name or Path(config.features[0]).stem, config.feature_dim,
                             config.training_set or manifest.name)
    stores = [load_feature_store(path, expected, storage) for path in config.features]
    store = concatenate_stores(stores)
    store.validate_against([p for p in proposals if p.key in store])
    return manifest, proposals, store, config.model_name or store.model_name


def _emit_report(results, output, storage):
    table = render_table(results)
    print(table, end='')
    if output:
        out = storage.resolve(output)
        storage.write_text(out / 'report.txt', table)
        storage.write_text(out / 'report.json', render_json(results))


def run_command(argv):
    """
    Runs one subcommand.

    Returns:
        int: 0 on success, 1 on a pipeline error, 2 on a usage error.
    """
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        setup_logging(args.log_level or default_log_level())
        if args.config_file:
            subparsers[args.command].set_defaults(**PipelineConfig.read_file(args.config_file))
            args = parser.parse_args(argv)
        missing = [key for key in REQUIRED[args.command] if not getattr(args, key, None)]
        if missing:
            subparsers[args.command].error(f"missing required option(s): {', '.join(missing)}")
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    except (DetensError, OSError, ValueError) as e:
        logging.error(f"{e}")
        return 1

    try:
        config = PipelineConfig.from_namespace(args).validate()
        logging.info(f"Config echo: {config.echo()}")
        COMMANDS[args.command](config, Storage())
        logging.info(f"{args.command} finished")
        return 0
    except (DetensError, OSError) as e:
        logging.error(f"{args.command} failed: {e}")
        return 1


def main():
    sys.exit(run_command(sys.argv[1:]))
