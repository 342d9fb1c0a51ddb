from pathlib import Path
from dotenv import load_dotenv

from split_settings.tools import include

load_dotenv()

include(
    '_paths.py',
    '_runtime.py',
)

BASE_DIR = Path(__file__).resolve().parent.parent

# Версии форматов артефактов
CHECKPOINT_MAGIC = b'LAPACKPT'
CHECKPOINT_VERSION = 1
SHARD_MAGIC = b'LAPASHRD'
SHARD_VERSION = 1
GRAMMAR_VERSION = 1
REPORT_SCHEMA_VERSION = 1

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'level': LOG_LEVEL,  # noqa: F821 pylint: disable=undefined-variable
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        }
    },
    'loggers': {
        'latent_action_pretraining': {
            'level': LOG_LEVEL,  # noqa: F821 pylint: disable=undefined-variable
            'handlers': ['console'],
        }
    }
}
