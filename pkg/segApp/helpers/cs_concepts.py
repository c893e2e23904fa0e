"""
Concept providers: per-image concept sets (labels + confidences) and their mapping
onto a target vocabulary by nearest text embedding.

Providers
    oracle        ground-truth categories present in the image, confidence 1.0
    noisy-oracle  oracle with seeded drops and distractor concepts
    scripted      concept file (JSON, schema_version 1)
    live          HTTP adapter returning concept-file entries, bounded fan-out
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import requests
from django.core.exceptions import ValidationError
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_random_exponential

from segApp.helpers.cs_config import DEFAULT_PROMPT, ConceptProviderSpec
from segApp.helpers.cs_embeddings import CategoryEmbeddingTable, encode_text
from segApp.helpers.cs_errors import ConceptLookupError, ConfigurationError, DatasetParseError, ProviderError
from segApp.helpers.cs_types import PanopticSegmentation, Vocabulary, normalize_label
from segApp.helpers.cs_utils import ConceptSegUtilityHelpers

logger = logging.getLogger(__name__)

CONCEPT_SCHEMA_VERSION = 1
MEAN_TOLERANCE = 1e-9


def aggregate_confidence(token_probs: Sequence[float]) -> float:
    """
    Concept confidence = arithmetic mean of its token probabilities.

    Raises:
        ValidationError: Empty list or a value outside [0, 1].
    """
    values = [float(p) for p in token_probs]
    if not values:
        raise ValidationError("token_probs must be non-empty")
    if any(not (0.0 <= p <= 1.0) for p in values):
        raise ValidationError(f"token_probs must lie in [0, 1], got {values}")
    return math.fsum(values) / len(values)


@dataclass
class Concept:
    label: str
    confidence: float
    token_probs: Optional[List[float]] = None


@dataclass
class ConceptSet:
    image_id: str
    concepts: List[Concept]
    prompt: str = DEFAULT_PROMPT

    def __post_init__(self):
        keys = [normalize_label(c.label) for c in self.concepts]
        if any(not k for k in keys):
            raise ValidationError(f"Concept labels for {self.image_id} must be non-blank")
        if len(set(keys)) != len(keys):
            raise ValidationError(f"Concept labels for {self.image_id} must be unique after normalization")
        for c in self.concepts:
            if not (0.0 <= c.confidence <= 1.0):
                raise ValidationError(f"Confidence of '{c.label}' ({c.confidence}) is outside [0, 1]")
            if c.token_probs is not None and abs(aggregate_confidence(c.token_probs) - c.confidence) > MEAN_TOLERANCE:
                raise ValidationError(f"Confidence of '{c.label}' must equal the mean of its token_probs")

    @property
    def labels(self) -> List[str]:
        return [c.label for c in self.concepts]

    def __len__(self):
        return len(self.concepts)


@dataclass
class MappedConcept:
    source_label: str
    target_category_id: int
    similarity: float
    confidence: float


@dataclass
class MappedConceptSet:
    image_id: str
    entries: List[MappedConcept] = field(default_factory=list)

    def merged_confidences(self) -> Dict[int, float]:
        """category_id -> max confidence over the concepts mapped onto it."""
        merged: Dict[int, float] = {}
        for entry in self.entries:
            merged[entry.target_category_id] = max(merged.get(entry.target_category_id, 0.0), entry.confidence)
        return merged

    def category_ids(self) -> List[int]:
        return sorted({e.target_category_id for e in self.entries})


def _merge_concepts(image_id: str, concepts: Iterable[Concept], prompt: str) -> ConceptSet:
    """Collapse duplicate labels (after normalization), keeping the max confidence."""
    kept: Dict[str, Concept] = {}
    for concept in concepts:
        key = normalize_label(concept.label)
        if key not in kept or concept.confidence > kept[key].confidence:
            kept[key] = concept
    return ConceptSet(image_id=image_id, concepts=list(kept.values()), prompt=prompt)


def parse_concept_entries(image_id: str, entries, prompt: str, source: str = '') -> ConceptSet:
    """Turn concept-file entries ``[{label, confidence?, token_probs?}]`` into a ConceptSet."""
    if not isinstance(entries, list):
        raise ValidationError(f"Concept entries for {image_id}{' in ' + source if source else ''} must be a list")
    concepts = []
    for entry in entries:
        if not isinstance(entry, dict) or not isinstance(entry.get('label'), str):
            raise ValidationError(f"Concept entry {entry!r} for {image_id} needs a text label")
        token_probs = entry.get('token_probs')
        confidence = entry.get('confidence')
        if token_probs is not None:
            if confidence is not None:
                logger.warning(
                    f"Concept '{entry['label']}' of {image_id} has both confidence and token_probs; using token_probs"
                )
            token_probs = [float(p) for p in token_probs]
            confidence = aggregate_confidence(token_probs)
        elif confidence is None:
            confidence = 1.0
        concepts.append(Concept(label=entry['label'], confidence=float(confidence), token_probs=token_probs))
    return _merge_concepts(image_id, concepts, prompt)


def read_concept_file(path) -> Dict[str, ConceptSet]:
    """
    Raises:
        DatasetParseError: Missing/corrupt file or wrong schema version.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetParseError(path, f'cannot read concept file ({e})') from e
    if not isinstance(raw, dict) or raw.get('schema_version') != CONCEPT_SCHEMA_VERSION:
        raise DatasetParseError(path, f"unsupported concept file schema_version {raw.get('schema_version') if isinstance(raw, dict) else None!r}")
    results = raw.get('results')
    if not isinstance(results, dict):
        raise DatasetParseError(path, "'results' must map image_id -> entries")
    prompt = raw.get('prompt') or DEFAULT_PROMPT
    try:
        return {image_id: parse_concept_entries(image_id, entries, prompt, source=str(path))
                for image_id, entries in results.items()}
    except ValidationError as e:
        raise DatasetParseError(path, '; '.join(e.messages)) from e


def write_concept_file(concept_sets: Iterable[ConceptSet], path, prompt: Optional[str] = None) -> Path:
    """Serialize concept sets to the concept-file schema."""
    concept_sets = list(concept_sets)
    if prompt is None:
        prompt = concept_sets[0].prompt if concept_sets else DEFAULT_PROMPT
    results = {}
    for cs in concept_sets:
        rows = []
        for c in cs.concepts:
            row = {'label': c.label, 'confidence': float(c.confidence)}
            if c.token_probs is not None:
                row['token_probs'] = [float(p) for p in c.token_probs]
            rows.append(row)
        results[cs.image_id] = rows
    payload = {'schema_version': CONCEPT_SCHEMA_VERSION, 'prompt': prompt, 'results': results}
    return ConceptSegUtilityHelpers.write_json(path, payload)


class OracleConceptProvider:
    """
    Ideal G-VLM: the labels of the ground-truth categories present in the image.
    """

    kind = 'oracle'

    def __init__(self, annotations: Mapping[str, PanopticSegmentation], vocabulary: Vocabulary,
                 prompt: str = DEFAULT_PROMPT):
        self.annotations = dict(annotations)
        self.vocabulary = vocabulary
        self.prompt = prompt

    def _gt_category_ids(self, image_id: str) -> List[int]:
        try:
            return self.annotations[image_id].category_ids()
        except KeyError:
            raise ConceptLookupError(image_id, source=f'{self.kind} annotations')

    def provide(self, image_id: str) -> ConceptSet:
        concepts = [Concept(self.vocabulary.categories[cid].label, 1.0)
                    for cid in self._gt_category_ids(image_id)]
        return ConceptSet(image_id=image_id, concepts=concepts, prompt=self.prompt)


class NoisyOracleConceptProvider(OracleConceptProvider):
    """
    Imperfect G-VLM: drops ground-truth concepts and adds distractors.

    Deterministic in (seed, image_id). True concepts get token probabilities in
    [0.6, 1.0], distractors in [0.1, 0.6].
    """

    kind = 'noisy-oracle'

    def __init__(self, annotations, vocabulary, prompt: str = DEFAULT_PROMPT,
                 drop_rate: float = 0.0, false_positive_rate: float = 0.0, seed: int = 0):
        super().__init__(annotations, vocabulary, prompt)
        self.drop_rate = drop_rate
        self.false_positive_rate = false_positive_rate
        self.seed = seed

    def _rng(self, image_id: str) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}:{image_id}".encode('utf-8')).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], 'little'))

    def provide(self, image_id: str) -> ConceptSet:
        gt = set(self._gt_category_ids(image_id))
        rng = self._rng(image_id)
        concepts = []
        for category in self.vocabulary.categories:
            n_tokens = max(1, len(category.label.split()))
            draw = rng.random()
            if category.category_id in gt:
                if draw < self.drop_rate:
                    continue
                probs = rng.uniform(0.6, 1.0, size=n_tokens)
            else:
                if draw >= self.false_positive_rate:
                    continue
                probs = rng.uniform(0.1, 0.6, size=n_tokens)
            token_probs = [float(p) for p in probs]
            concepts.append(Concept(category.label, aggregate_confidence(token_probs), token_probs))
        return ConceptSet(image_id=image_id, concepts=concepts, prompt=self.prompt)


class ScriptedConceptProvider:
    """Concept sets frozen in a concept file."""

    kind = 'scripted'

    def __init__(self, path):
        self.path = str(path)
        self.entries = read_concept_file(path)

    def provide(self, image_id: str) -> ConceptSet:
        try:
            return self.entries[image_id]
        except KeyError:
            raise ConceptLookupError(image_id, source=self.path)


class LiveConceptProvider:
    """
    HTTP seam for an external G-VLM service.

    POSTs ``{"image_id", "prompt"}`` and expects the concept-file entry list for
    that image. Requests are retried with exponential backoff; batches fan out
    over at most ``max_in_flight`` concurrent calls.
    """

    kind = 'live'

    def __init__(self, url: str, prompt: str = DEFAULT_PROMPT, timeout: float = 10.0,
                 max_in_flight: int = 4, attempts: int = 3, wait_max: float = 5.0):
        self.url = url
        self.prompt = prompt
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self.attempts = attempts
        self.wait_max = wait_max
        self.headers = {'Content-Type': 'application/json', 'Accept': 'application/json'}
        self._utils = ConceptSegUtilityHelpers()

    def _post(self, image_id: str):
        retrying = Retrying(
            wait=wait_random_exponential(multiplier=1, max=self.wait_max),
            stop=stop_after_attempt(self.attempts),
            retry=retry_if_exception_type(requests.RequestException),
            before_sleep=lambda state: logger.warning(
                f"Live concept adapter retry {state.attempt_number} for {image_id}: {state.outcome.exception()}"
            ),
            retry_error_callback=lambda state: self._utils.on_retry_failure(state, f"Live concept adapter {self.url}"),
        )
        for attempt in retrying:
            with attempt:
                response = requests.post(self.url, json={'image_id': image_id, 'prompt': self.prompt},
                                         headers=self.headers, timeout=self.timeout)
                response.raise_for_status()
                return response.json()

    def provide(self, image_id: str) -> ConceptSet:
        payload = self._post(image_id)
        if isinstance(payload, dict) and 'results' in payload:
            payload = payload['results'].get(image_id) if isinstance(payload['results'], dict) else None
        if payload is None:
            raise ProviderError(f"Live concept adapter {self.url} returned no entry for '{image_id}'")
        try:
            return parse_concept_entries(image_id, payload, self.prompt, source=self.url)
        except ValidationError as e:
            raise ProviderError(f"Live concept adapter {self.url} answered malformed concepts: {e}") from e

    def provide_many(self, image_ids: Sequence[str]) -> List[ConceptSet]:
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.provide, image_ids))


def build_concept_provider(spec: ConceptProviderSpec, annotations: Optional[Mapping[str, PanopticSegmentation]] = None,
                           vocabulary: Optional[Vocabulary] = None):
    """Instantiate the provider a ConceptProviderSpec describes."""
    if spec.kind in ('oracle', 'noisy-oracle'):
        if annotations is None or vocabulary is None:
            raise ConfigurationError(f"concepts.kind={spec.kind} needs the dataset annotations and vocabulary")
        if spec.kind == 'oracle':
            return OracleConceptProvider(annotations, vocabulary, prompt=spec.prompt)
        return NoisyOracleConceptProvider(annotations, vocabulary, prompt=spec.prompt, drop_rate=spec.drop_rate,
                                          false_positive_rate=spec.false_positive_rate, seed=spec.seed)
    if spec.kind == 'scripted':
        return ScriptedConceptProvider(spec.path)
    return LiveConceptProvider(spec.url, prompt=spec.prompt, timeout=spec.timeout_seconds,
                               max_in_flight=spec.max_in_flight)


def provide_concepts(image_id: str, source) -> ConceptSet:
    """
    Ask a provider for one image's concept set.

    Raises:
        ConceptLookupError: The image is not covered by a scripted/oracle source.
        ProviderError: A live adapter is unreachable or malformed.
    """
    return source.provide(image_id)


def provide_concepts_batch(image_ids: Sequence[str], source) -> List[ConceptSet]:
    if hasattr(source, 'provide_many'):
        return source.provide_many(image_ids)
    return [source.provide(image_id) for image_id in image_ids]


def similarity_matrix(labels: Sequence[str], table: CategoryEmbeddingTable) -> np.ndarray:
    """Cosine similarity of each label (encoded like the table) to each table row."""
    if table.spec is None:
        raise ConfigurationError("Embedding table carries no encoder spec; cannot encode concept labels")
    concept_table = encode_text(labels, table.spec)
    return np.clip(concept_table.vectors @ table.vectors.T, -1.0, 1.0)


def map_to_vocabulary(concepts: ConceptSet, vocabulary: Vocabulary, table: CategoryEmbeddingTable) -> MappedConceptSet:
    """
    Assign each concept to the vocabulary category with maximal cosine similarity.

    Ties go to the lowest category_id. Confidences are carried through unchanged;
    MappedConceptSet.merged_confidences applies the max rule per category.

    Raises:
        ValidationError: Empty vocabulary, or table rows that do not match it.
    """
    if vocabulary is None or len(vocabulary) == 0:
        raise ValidationError("map_to_vocabulary needs a non-empty vocabulary")
    if len(table) != len(vocabulary):
        raise ValidationError(f"Embedding table has {len(table)} rows for {len(vocabulary)} categories")
    if not concepts.concepts:
        return MappedConceptSet(image_id=concepts.image_id)
    sims = similarity_matrix(concepts.labels, table)
    entries = []
    for concept, row in zip(concepts.concepts, sims):
        target = int(np.argmax(row))
        entries.append(MappedConcept(concept.label, target, float(row[target]), float(concept.confidence)))
    return MappedConceptSet(image_id=concepts.image_id, entries=entries)
