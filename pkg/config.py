import os
import json
import logging
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

# Public architecture constants, used only to size synthetic problems.
# models/model_presets.json overrides these when present.
DEFAULT_MODEL_PRESETS = {
    'llama-3.2-1b': {'d': 2048, 'n_h': 32},
    'llama-2-7b': {'d': 4096, 'n_h': 32},
    'llama-3.1-8b': {'d': 4096, 'n_h': 32},
    'llama-2-13b': {'d': 5120, 'n_h': 40},
}

# Doubling grid 512 ... 131072
DEFAULT_SEQ_LENS = [512 * (2 ** i) for i in range(9)]


def _env_flag(name, default):
    value = os.environ.get(name)
    if value is None or value == '':
        return default
    return value.strip().lower() in ('1', 'true', 'on', 'yes')


class Config:
    """Base configuration class"""
    SEED = int(os.environ.get('KVQ_SEED') or 0)

    # Quantization
    BITS = int(os.environ.get('KVQ_BITS') or 2)
    GROUP_SIZE = int(os.environ.get('KVQ_GROUP_SIZE') or 32)
    QUANT_MODE = os.environ.get('KVQ_MODE') or 'hybrid'

    # High-precision windows
    W_SINK = int(os.environ.get('KVQ_W_SINK') or 32)
    W_RECENT = int(os.environ.get('KVQ_W_RECENT') or 96)
    NORMALIZE_KEYS = _env_flag('KVQ_NORMALIZE', True)

    # Timing protocol
    WARMUP = int(os.environ.get('KVQ_WARMUP') or 100)
    REPS = int(os.environ.get('KVQ_REPS') or 1000)
    MAX_BYTES = int(os.environ.get('KVQ_MAX_BYTES') or 1024 ** 3)  # 1GiB per grid point
    HYBRID_LATENCY_BOUND = float(os.environ.get('KVQ_HYBRID_LATENCY_BOUND') or 1.5)

    # Decode
    HEAD_JOBS = int(os.environ.get('KVQ_HEAD_JOBS') or 1)
    ROPE_THETA = float(os.environ.get('KVQ_ROPE_THETA') or 10000.0)

    LOG_LEVEL = os.environ.get('KVQ_LOG_LEVEL') or 'INFO'
    PRESETS_PATH = os.environ.get('KVQ_PRESETS_PATH') or os.path.join(
        os.path.dirname(os.path.abspath(__file__)), 'models', 'model_presets.json')


class DevelopmentConfig(Config):
    """Development configuration"""
    LOG_LEVEL = os.environ.get('KVQ_LOG_LEVEL') or 'DEBUG'


class TestingConfig(Config):
    """Testing configuration"""
    WARMUP = 2
    REPS = 5
    MAX_BYTES = 64 * 1024 * 1024


class BenchmarkConfig(Config):
    """Benchmark configuration (the full measurement protocol)"""
    LOG_LEVEL = os.environ.get('KVQ_LOG_LEVEL') or 'WARNING'


# Configuration dictionary
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'benchmark': BenchmarkConfig,
    'default': Config
}


def get_config(name=None):
    """Return the configuration class selected by name or KVQ_ENV."""
    name = name or os.environ.get('KVQ_ENV') or 'default'
    return config.get(name, Config)


def load_model_presets(path=None):
    """Load the (d, n_h) preset table, falling back to the built-in constants."""
    path = path or Config.PRESETS_PATH
    presets = dict(DEFAULT_MODEL_PRESETS)
    try:
        if os.path.exists(path):
            with open(path, 'r') as f:
                loaded = json.load(f)
            for name, dims in loaded.items():
                presets[name] = {'d': int(dims['d']), 'n_h': int(dims['n_h'])}
    except (OSError, ValueError, KeyError, TypeError) as e:
        logger.warning("Could not load model presets from %s: %s", path, e)
    return presets
