"""
Configuration management for mtl-lab
"""
import os
from dotenv import load_dotenv

load_dotenv()


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


class Config:
    """Toolkit defaults, overridable through MTL_LAB_* environment variables"""

    TOOL_NAME = "mtl-lab"
    TOOL_VERSION = "0.3.0"

    # Run settings
    DEFAULT_SEED = _env_int('MTL_LAB_SEED', 0)
    THREADS = _env_int('MTL_LAB_THREADS', 1)
    LOG_LEVEL = os.getenv('MTL_LAB_LOG_LEVEL', 'WARNING')
    OUTPUT_DIR = os.getenv('MTL_LAB_OUTPUT', 'mtl_lab_out')

    # Task affinity
    NUM_IMAGES = _env_int('MTL_LAB_NUM_IMAGES', 500)  # K held-out images

    # Branch search
    MAX_TASKS = 12  # enumeration guard
    AFFINITY_TOL = 1e-9  # slack when validating loaded affinity tensors

    # Task balancing
    DWA_TEMPERATURE = 2.0
    GRADNORM_LR = 0.025
    MGDA_TOL = 1e-10
    MIN_SIGMA = 1e-6  # uncertainty floor for zero losses

    # Contrastive setup
    TEMPERATURE = 0.2
    MOMENTUM = 0.999
    MULTICROP_MOMENTUM = 0.995
    NUM_NEIGHBORS = 20
    NN_WEIGHT = 0.4
    UNIT_NORM_TOL = 1e-6

    # Crop geometry
    TWO_CROP_SCALE = (0.2, 1.0)
    GLOBAL_CROP_SCALE = (0.2, 1.0)
    SMALL_CROP_SCALE = (0.05, 0.14)
    ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
    CROP_ATTEMPTS = 10
    MULTICROP_MAX_REJECTIONS = 1000
    IOU_MAX_REJECTIONS = 100_000
    IOU_BINS = 20

    # Pixel affinity
    RELATIVE_THRESHOLD = 0.05
    RELATIVE_EPS = 1e-12
    AFFINITY_RADIUS = 1

    @classmethod
    def validate(cls):
        """Validate that every default is inside its legal range"""
        checks = [
            ('THREADS', cls.THREADS >= 1),
            ('NUM_IMAGES', cls.NUM_IMAGES >= 3),
            ('TEMPERATURE', cls.TEMPERATURE > 0),
            ('MOMENTUM', 0.0 <= cls.MOMENTUM <= 1.0),
            ('NUM_NEIGHBORS', cls.NUM_NEIGHBORS >= 1),
            ('NN_WEIGHT', cls.NN_WEIGHT >= 0),
            ('RELATIVE_THRESHOLD', cls.RELATIVE_THRESHOLD > 0),
            ('DWA_TEMPERATURE', cls.DWA_TEMPERATURE > 0),
        ]

        invalid = [name for name, ok in checks if not ok]

        if invalid:
            raise ValueError(f"Invalid configuration: {', '.join(invalid)}")

        return True

# Validate on import
Config.validate()
