# segApp/management/commands/run.py
import logging

import sentry_sdk
from django.core.exceptions import ImproperlyConfigured, ValidationError
from django.core.management.base import BaseCommand, CommandError

from segApp.helpers.cs_errors import ConceptLookupError, NumericalError, ProviderError
from segApp.helpers.cs_pipeline import COMMANDS, run

logger = logging.getLogger(__name__)

EXPECTED_ERRORS = (ImproperlyConfigured, ValidationError, ConceptLookupError, ProviderError, NumericalError, OSError)


def describe_error(error: Exception) -> str:
    if isinstance(error, ValidationError):
        return '; '.join(error.messages)
    return str(error)


class Command(BaseCommand):
    """
    Operator surface for the segmentation pipeline.

    Exit codes: 0 success, 1 validation/runtime failure, 2 usage error.
    """
    help = (
        'Run one pipeline command (synth, train, eval, infer, concepts-eval, '
        'cluster-features) driven by a TOML run configuration.'
    )

    def add_arguments(self, parser):
        parser.add_argument('pipeline_command', choices=COMMANDS, help='Pipeline command to run')
        parser.add_argument('--config', dest='config_path', default=None, help='TOML run configuration')
        parser.add_argument(
            '--set',
            dest='overrides',
            action='append',
            default=[],
            metavar='PATH=VALUE',
            help='Dotted-path override, e.g. --set train.epochs=3 (repeatable)'
        )
        parser.add_argument('--profile', default=None, choices=['full', 'desk'], help='Named profile')
        parser.add_argument('--mode', default=None, choices=['vocabulary-free', 'open-vocabulary'],
                            help='Inference mode for eval/infer')
        parser.add_argument('--reweight', default=None,
                            choices=['exp', 'linear', 'quadratic', 'normalized-exp', 'none', 'all'],
                            help="Reweight variant for eval/infer; 'all' runs every variant in one pass")
        parser.add_argument('--output-dir', dest='output_dir', default=None, help='Override output_dir')

    def handle(self, *args, **options):
        command = options['pipeline_command']
        try:
            result = run(
                command,
                config_path=options['config_path'],
                overrides=options['overrides'],
                mode=options['mode'],
                reweight=options['reweight'],
                output_dir=options['output_dir'],
                profile=options['profile'],
            )
        except EXPECTED_ERRORS as e:
            logger.error(f"{command} failed: {describe_error(e)}")
            raise CommandError(f"{command} failed: {describe_error(e)}", returncode=1)
        except Exception as e:
            sentry_sdk.capture_exception(e)
            raise CommandError(f"{command} failed unexpectedly: {e}", returncode=1)

        for artifact in result['artifacts']:
            self.stdout.write(f'  {artifact}')
        self.stdout.write(self.style.SUCCESS(
            f"Successfully ran {command} into {result['output_dir']} (manifest: {result['manifest']})"
        ))
