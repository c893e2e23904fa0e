"""
Shared helpers: global seeding, precision lookup, byte-stable JSON output and the
retry-exhaustion hook used by the live concept provider.
"""
import json
import logging
import random
from pathlib import Path

import numpy as np
import sentry_sdk
import torch

from segApp.helpers.cs_errors import ConfigurationError, ProviderError

logger = logging.getLogger(__name__)

TORCH_DTYPES = {'float32': torch.float32, 'float64': torch.float64}


class ConceptSegUtilityHelpers:
    """
    General utilities: seeding, dtype lookup, deterministic JSON artifacts.
    """

    @staticmethod
    def seed_everything(seed: int) -> torch.Generator:
        """
        Seed python, numpy and torch and return a dedicated torch generator.

        Args:
            seed (int): Run seed.

        Returns:
            torch.Generator: Generator seeded with ``seed`` for parameter init.
        """
        random.seed(seed)
        np.random.seed(seed % (2 ** 32))
        torch.manual_seed(seed)
        generator = torch.Generator()
        generator.manual_seed(seed)
        return generator

    @staticmethod
    def torch_dtype(precision: str) -> torch.dtype:
        try:
            return TORCH_DTYPES[precision]
        except KeyError:
            raise ConfigurationError(f"Unknown precision '{precision}' (choose from {sorted(TORCH_DTYPES)})")

    @staticmethod
    def write_json(path, payload) -> Path:
        """
        Write ``payload`` as sorted, indented JSON so reruns are byte-identical.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')
        return path

    @staticmethod
    def round_floats(payload, digits: int = 10):
        """Round floats recursively so tiny reduction-order noise does not leak into reports."""
        if isinstance(payload, float):
            return round(payload, digits)
        if isinstance(payload, dict):
            return {k: ConceptSegUtilityHelpers.round_floats(v, digits) for k, v in payload.items()}
        if isinstance(payload, (list, tuple)):
            return [ConceptSegUtilityHelpers.round_floats(v, digits) for v in payload]
        return payload

    def on_retry_failure(self, retry_state, provider_name: str):
        """
        Handle exhausted retries of a live adapter: report and raise ProviderError.

        Args:
            retry_state: Tenacity retry state.
            provider_name (str): Adapter description used in the error message.
        """
        exc = retry_state.outcome.exception()
        sentry_sdk.capture_exception(exc)
        logger.error(f"{provider_name} failed after {retry_state.attempt_number} attempts: {exc}")
        raise ProviderError(f"{provider_name} unavailable: {exc}") from exc
