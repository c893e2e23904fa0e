"""
Command pipelines behind ``manage.py run``: synth, train, eval, infer,
concepts-eval and cluster-features. Every command reads only the paths its
RunConfig declares, writes only under the resolved output directory and leaves a
run manifest (command, config hash, seed, artifacts) behind.
"""

import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from segApp.helpers.cs_checkpoint import load_checkpoint, restore_model, save_checkpoint
from segApp.helpers.cs_concepts import (
    build_concept_provider, map_to_vocabulary, provide_concepts_batch,
)
from segApp.helpers.cs_config import RunConfig, config_hash, load_run_config, resolve_output_dir
from segApp.helpers.cs_embeddings import encode_text
from segApp.helpers.cs_errors import ConfigurationError
from segApp.helpers.cs_inference import (
    REWEIGHT_VARIANTS, ConceptSegPredictor, cluster_features, to_instances, to_semantic, write_cluster_outputs,
)
from segApp.helpers.cs_metrics import (
    ConceptPRReport, MeanIoUReport, PQReport, build_metric_report, instance_map, mean_iou,
    panoptic_quality, thing_targets,
)
from segApp.helpers.cs_model import build_model
from segApp.helpers.cs_synth import default_vocabulary, generate_dataset, read_dataset, write_dataset
from segApp.helpers.cs_training import TrainingExample, fit, rasterize_targets, write_loss_log
from segApp.helpers.cs_utils import ConceptSegUtilityHelpers

logger = logging.getLogger(__name__)

COMMANDS = ('synth', 'train', 'eval', 'infer', 'concepts-eval', 'cluster-features')
CHECKPOINT_NAME = 'checkpoint.cseg'
LOSS_LOG_NAME = 'loss_log.csv'
COMPARISON_NAME = 'reweight_comparison.csv'
CONCEPT_PR_NAME = 'concept_pr.json'
EVAL_SEED_OFFSET = 10_000
COMPARISON_COLUMNS = ['variant', 'pq', 'sq', 'rq', 'miou', 'miou_seen', 'miou_unseen', 'map']


class ConceptSegPipeline:
    """
    One configured run. Methods map one-to-one onto the operator commands and
    return the artifact paths they wrote.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.output_dir = resolve_output_dir(config)
        self.artifacts: List[Path] = []

    # paths

    @property
    def train_dir(self) -> Path:
        return Path(self.config.data.train_dir) if self.config.data.train_dir else self.output_dir / 'data' / 'train'

    @property
    def eval_dir(self) -> Path:
        return Path(self.config.data.eval_dir) if self.config.data.eval_dir else self.output_dir / 'data' / 'eval'

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.config.checkpoint) if self.config.checkpoint else self.output_dir / CHECKPOINT_NAME

    def _record(self, path) -> Path:
        path = Path(path)
        self.artifacts.append(path)
        logger.info(f"Wrote {path}")
        return path

    def write_run_manifest(self, command: str, options: Optional[dict] = None) -> Path:
        artifacts = []
        for path in self.artifacts:
            try:
                artifacts.append(str(path.relative_to(self.output_dir)))
            except ValueError:
                artifacts.append(str(path))
        payload = {
            'command': command,
            'config_hash': config_hash(self.config),
            'seed': self.config.seed,
            'profile': self.config.profile,
            'options': options or {},
            'artifacts': sorted(set(artifacts)),
        }
        return ConceptSegUtilityHelpers.write_json(self.output_dir / f'run_manifest_{command}.json', payload)

    # shared loading

    def text_table(self, vocabulary):
        return encode_text(vocabulary.labels, self.config.text_encoder)

    def load_predictor(self, vocabulary):
        checkpoint = load_checkpoint(self.checkpoint_path, vocabulary=vocabulary)
        trained = checkpoint.config
        model = build_model(trained.model, seed=trained.seed, precision=trained.train.precision, freeze_backbone=True)
        restore_model(checkpoint, model)
        table = encode_text(vocabulary.labels, trained.text_encoder)
        return ConceptSegPredictor(model, vocabulary, table, self.config.inference)

    def concept_sets(self, spec, scenes, vocabulary) -> Dict[str, object]:
        annotations = {image.image_id: annotation for image, annotation in scenes}
        provider = build_concept_provider(spec, annotations, vocabulary)
        image_ids = [image.image_id for image, _ in scenes]
        return dict(zip(image_ids, provide_concepts_batch(image_ids, provider)))

    # commands

    def synth(self) -> List[Path]:
        data = self.config.data
        vocabulary = default_vocabulary(data.seen_things, data.unseen_things, data.seen_stuff, data.unseen_stuff)
        train = generate_dataset(self.config.scene, vocabulary, data.train_scenes, split='train')
        eval_scene = self.config.scene.model_copy(update={'seed': self.config.scene.seed + EVAL_SEED_OFFSET})
        held_out = generate_dataset(eval_scene, vocabulary, data.eval_scenes, split='eval')
        write_dataset(train, vocabulary, self.train_dir)
        write_dataset(held_out, vocabulary, self.eval_dir)
        return [self._record(self.train_dir), self._record(self.eval_dir)]

    def train(self) -> List[Path]:
        scenes, vocabulary = read_dataset(self.train_dir)
        table = self.text_table(vocabulary)
        class_ids = vocabulary.seen_ids
        class_index = {category_id: column for column, category_id in enumerate(class_ids)}
        concepts = self.concept_sets(self.config.train_concepts, scenes, vocabulary)
        stride = self.config.model.stride

        examples = []
        for image, annotation in scenes:
            concept_ids = map_to_vocabulary(concepts[image.image_id], vocabulary, table).category_ids()
            if not concept_ids:
                logger.warning(f"No training concepts for {image.image_id}; using the seen vocabulary")
                concept_ids = list(class_ids)
            examples.append(TrainingExample(image, rasterize_targets(annotation, stride, class_index), concept_ids))

        model = build_model(self.config.model, seed=self.config.seed, precision=self.config.train.precision,
                            freeze_backbone=self.config.train.freeze_backbone)
        result = fit(examples, model, self.config.train, table, class_ids)
        logger.info(f"Trained {result.steps} steps on {len(examples)} scenes")

        self.output_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.checkpoint_path, model, self.config, vocabulary,
                        extra={'class_ids': class_ids, 'steps': result.steps})
        write_loss_log(result.loss_log, self.output_dir / LOSS_LOG_NAME)
        return [self._record(self.checkpoint_path), self._record(self.output_dir / LOSS_LOG_NAME)]

    def _variants(self, mode: str, reweight: Optional[str]) -> List[str]:
        if mode == 'vocabulary-free':
            if reweight not in (None, 'none'):
                logger.info(f"Vocabulary-free mode ignores reweight '{reweight}'")
            return ['none']
        if reweight == 'all':
            return list(REWEIGHT_VARIANTS)
        return [reweight or self.config.inference.reweight]

    def _predict_all(self, mode: str, variants: Sequence[str]):
        scenes, vocabulary = read_dataset(self.eval_dir)
        concepts = self.concept_sets(self.config.concepts, scenes, vocabulary)
        predictor = self.load_predictor(vocabulary)
        predictions = {variant: [] for variant in variants}
        for image, annotation in scenes:
            results = predictor.predict(image, concepts[image.image_id], variants=variants, mode=mode)
            for variant in variants:
                predictions[variant].append((image, annotation, results[variant]))
        return scenes, vocabulary, predictor, concepts, predictions

    def evaluate(self, mode: Optional[str] = None, reweight: Optional[str] = None) -> List[Path]:
        mode = mode or self.config.inference.mode
        variants = self._variants(mode, reweight)
        scenes, vocabulary, predictor, concepts, predictions = self._predict_all(mode, variants)

        rows, written = [], []
        for variant in variants:
            pq, miou = PQReport(vocabulary), MeanIoUReport(vocabulary=vocabulary)
            concept_pr = ConceptPRReport()
            instance_preds, instance_gts = [], {}
            digest = hashlib.sha256()
            for image, annotation, prediction in predictions[variant]:
                pq += panoptic_quality(prediction.panoptic, annotation, vocabulary)
                miou += mean_iou(to_semantic(prediction.panoptic), to_semantic(annotation), vocabulary)
                instance_preds.extend(to_instances(prediction.panoptic, vocabulary, prediction.mask_probs))
                instance_gts[image.image_id] = thing_targets(annotation, vocabulary)
                mapped = map_to_vocabulary(concepts[image.image_id], vocabulary, predictor.table)
                concept_pr.add(image.image_id, mapped.category_ids(), annotation.category_ids())
                digest.update(np.ascontiguousarray(prediction.mask_logits.detach().cpu().numpy()).tobytes())

            map_report = instance_map(instance_preds, instance_gts)
            report = build_metric_report(pq, miou, map_report, concept_pr, extra={
                'mode': mode,
                'variant': variant,
                'num_images': len(scenes),
                'seed': self.config.seed,
                'mask_digest': digest.hexdigest(),
            })
            path = self.output_dir / f'metrics_{mode}_{variant}.json'
            ConceptSegUtilityHelpers.write_json(path, ConceptSegUtilityHelpers.round_floats(report))
            written.append(self._record(path))
            breakdown = report['miou_breakdown']
            rows.append({'variant': variant, 'pq': report['pq'], 'sq': report['sq'], 'rq': report['rq'],
                         'miou': report['miou'], 'miou_seen': breakdown.get('seen'),
                         'miou_unseen': breakdown.get('unseen'), 'map': report['map']})

        if len(variants) > 1:
            comparison = pd.DataFrame(rows, columns=COMPARISON_COLUMNS)
            comparison.to_csv(self.output_dir / COMPARISON_NAME, index=False, float_format='%.10g')
            written.append(self._record(self.output_dir / COMPARISON_NAME))
        return written

    def infer(self, mode: Optional[str] = None, reweight: Optional[str] = None) -> List[Path]:
        mode = mode or self.config.inference.mode
        variants = self._variants(mode, reweight)
        _, vocabulary, _, _, predictions = self._predict_all(mode, variants)
        written = []
        for variant in variants:
            target = self.output_dir / 'predictions' / f'{mode}_{variant}'
            write_dataset([(image, p.panoptic) for image, _, p in predictions[variant]], vocabulary, target)
            written.append(self._record(target))
        return written

    def concepts_eval(self) -> List[Path]:
        scenes, vocabulary = read_dataset(self.eval_dir)
        table = self.text_table(vocabulary)
        concepts = self.concept_sets(self.config.concepts, scenes, vocabulary)
        report = ConceptPRReport()
        for image, annotation in scenes:
            mapped = map_to_vocabulary(concepts[image.image_id], vocabulary, table)
            report.add(image.image_id, mapped.category_ids(), annotation.category_ids())
        payload = {**report.as_dict(), 'provider': self.config.concepts.kind, 'num_images': len(scenes)}
        path = ConceptSegUtilityHelpers.write_json(self.output_dir / CONCEPT_PR_NAME,
                                                   ConceptSegUtilityHelpers.round_floats(payload))
        return [self._record(path)]

    def cluster(self) -> List[Path]:
        scenes, vocabulary = read_dataset(self.eval_dir)
        predictor = self.load_predictor(vocabulary)
        concepts = self.concept_sets(self.config.concepts, scenes, vocabulary)
        settings = self.config.cluster
        written = []
        for image, _ in scenes[:settings.max_images]:
            grids = predictor.enhanced_features(image, concepts[image.image_id])
            for name, grid in zip(('vg', 'vsa'), grids):
                result = cluster_features(grid, settings.k, seed=self.config.seed, n_init=settings.n_init)
                stem = self.output_dir / 'clusters' / f'{image.image_id}_{name}'
                write_cluster_outputs(result, stem.with_suffix('.png'), stem.with_suffix('.json'),
                                      metadata={'image_id': image.image_id, 'features': name})
                written.extend([self._record(stem.with_suffix('.png')), self._record(stem.with_suffix('.json'))])
        return written


def run(command: str, config_path=None, overrides: Sequence[str] = (), mode: Optional[str] = None,
        reweight: Optional[str] = None, output_dir: Optional[str] = None, profile: Optional[str] = None) -> Dict:
    """
    Execute one operator command.

    Returns:
        dict: command, output_dir, artifacts and manifest path.

    Raises:
        ConfigurationError: Unknown command or invalid configuration.
        ValidationError / DatasetParseError / ConceptLookupError: Bad inputs.
    """
    if command not in COMMANDS:
        raise ConfigurationError(f"Unknown command '{command}' (choose from {', '.join(COMMANDS)})")
    overrides = list(overrides or ())
    if output_dir:
        overrides.append(f"output_dir='{output_dir}'")
    if mode:
        overrides.append(f"inference.mode='{mode}'")
    if reweight and reweight != 'all':
        overrides.append(f"inference.reweight='{reweight}'")
    config = load_run_config(config_path, overrides, profile=profile)

    pipeline = ConceptSegPipeline(config)
    ConceptSegUtilityHelpers.seed_everything(config.seed)
    logger.info(f"Running {command} (profile={config.profile}, seed={config.seed}) into {pipeline.output_dir}")
    handlers = {
        'synth': pipeline.synth,
        'train': pipeline.train,
        'eval': lambda: pipeline.evaluate(mode, reweight),
        'infer': lambda: pipeline.infer(mode, reweight),
        'concepts-eval': pipeline.concepts_eval,
        'cluster-features': pipeline.cluster,
    }
    artifacts = handlers[command]()
    manifest = pipeline.write_run_manifest(command, options={'mode': mode, 'reweight': reweight})
    return {'command': command, 'output_dir': str(pipeline.output_dir),
            'artifacts': [str(p) for p in artifacts], 'manifest': str(manifest)}
