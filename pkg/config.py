#!/usr/bin/env python3
"""
Scale presets, environment handling and seeded random streams.

Two presets are provided: the desk-scale configuration that runs on a laptop
CPU, and the full-scale configuration that carries the full-size constants.
Both keep the same architecture shapes; only sizes and rates differ.
"""

import os
import zlib
import logging
from pathlib import Path
from typing import Any, Dict

import numpy as np

from errors import ConfigurationError

logger = logging.getLogger(__name__)

current_dir = Path(__file__).parent.absolute()


def load_environment_variables():
    """Load environment variables from a .env file without overriding real ones"""
    env_file = current_dir / '.env'

    if env_file.exists():
        with open(env_file, 'r', encoding='utf-8') as f:
            for line in f:
                line = line.strip()
                if line and not line.startswith('#') and '=' in line:
                    key, value = line.split('=', 1)
                    os.environ.setdefault(key.strip(), value.strip())


# Load environment variables before the presets read them
load_environment_variables()


class DeskScaleConfig:
    """Laptop-sized preset"""

    SCALE = 'desk'

    # Audio
    SAMPLE_RATE = 8000
    SRIR_DURATION = 0.25
    SCENE_DURATION = 4.0
    STFT_WINDOW = 64
    STFT_HOP = 32

    # Simulation
    ISM_MAX_ORDER = 6
    PERTURBATION = 0.02
    DIFFUSE_TAIL = True

    # Encoder
    ENCODER_BLOCKS = 6
    ENCODER_CHANNELS = 32
    PROJECTION_HIDDEN = 64
    PROJECTION_DIM = 32
    ENCODER_EPOCHS = 20
    ENCODER_BATCH = 8
    ENCODER_LR = 1e-3

    # Generator
    UNET_DEPTH = 4
    UNET_CHANNELS = 32
    UNET_CHANNEL_MULT = (1, 2, 2, 4)
    RFF_DIM = 64
    GENERATOR_EPOCHS = 200
    GENERATOR_BATCH = 8
    GENERATOR_LR = 1e-3

    # Dataset
    TRAIN_ROOMS = 16
    VAL_ROOMS = 4
    TEST_ROOMS = 2

    # Environment
    SEED = int(os.environ.get('SRIR_SEED', '0'))
    LOG_DIR = os.environ.get('SRIR_LOG_DIR')
    LOG_LEVEL = os.environ.get('SRIR_LOG_LEVEL', 'INFO')
    WORKDIR = os.environ.get('SRIR_WORKDIR', str(current_dir / 'runs'))


class FullScaleConfig(DeskScaleConfig):
    """Full-size preset with the published constants"""

    SCALE = 'full'

    SAMPLE_RATE = 48000
    SRIR_DURATION = 0.5
    STFT_WINDOW = 512
    STFT_HOP = 128

    ISM_MAX_ORDER = 12

    ENCODER_BLOCKS = 9
    ENCODER_CHANNELS = 128
    PROJECTION_HIDDEN = 256
    PROJECTION_DIM = 128
    ENCODER_EPOCHS = 125
    ENCODER_BATCH = 16
    ENCODER_LR = 3e-4

    UNET_DEPTH = 6
    UNET_CHANNELS = 64
    UNET_CHANNEL_MULT = (1, 1, 2, 2, 4, 4)
    RFF_DIM = 256
    GENERATOR_EPOCHS = 300
    GENERATOR_BATCH = 8
    GENERATOR_LR = 3e-4

    TRAIN_ROOMS = 45000
    VAL_ROOMS = 2500
    TEST_ROOMS = 100


SCALES = {
    'desk': DeskScaleConfig,
    'full': FullScaleConfig,
}


def scale_config(scale: str = None):
    """Return the preset class for a scale name (defaults to $SRIR_SCALE or desk)"""
    scale = scale or os.environ.get('SRIR_SCALE', 'desk')
    if scale not in SCALES:
        raise ConfigurationError(f"Unknown scale '{scale}', choose from {sorted(SCALES)}")
    return SCALES[scale]


def preset(scale: str = None) -> Dict[str, Any]:
    """Resolve the typed per-module configurations for a scale"""
    # Module imports are local: every module imports rng_stream from here.
    from room_sim import SimConfig, octave_bands_for
    from features import FeatureConfig
    from room_encoder import EncoderConfig
    from srir_diffusion import DiffusionConfig
    from dataset_pipeline import DatasetConfig

    cfg = scale_config(scale)
    fs = cfg.SAMPLE_RATE

    sim = SimConfig(
        sample_rate=fs,
        duration=cfg.SRIR_DURATION,
        max_order=cfg.ISM_MAX_ORDER,
        tail=cfg.DIFFUSE_TAIL,
        perturbation=cfg.PERTURBATION,
        bands=octave_bands_for(fs),
    )
    features = FeatureConfig(
        sample_rate=fs,
        window=cfg.STFT_WINDOW,
        hop=cfg.STFT_HOP,
        duration=cfg.SCENE_DURATION,
    )
    encoder = EncoderConfig(
        block_count=cfg.ENCODER_BLOCKS,
        base_channels=cfg.ENCODER_CHANNELS,
        projection_hidden=cfg.PROJECTION_HIDDEN,
        embedding_dim=cfg.PROJECTION_DIM,
        input_bins=cfg.STFT_WINDOW // 2 + 1,
        epochs=cfg.ENCODER_EPOCHS,
        batch_size=cfg.ENCODER_BATCH,
        learning_rate=cfg.ENCODER_LR,
    )
    diffusion = DiffusionConfig(
        depth=cfg.UNET_DEPTH,
        base_channels=cfg.UNET_CHANNELS,
        channel_mult=tuple(cfg.UNET_CHANNEL_MULT),
        rff_dim=cfg.RFF_DIM,
        h_dim=cfg.ENCODER_CHANNELS,
        sample_rate=fs,
        duration=cfg.SRIR_DURATION,
        epochs=cfg.GENERATOR_EPOCHS,
        batch_size=cfg.GENERATOR_BATCH,
        learning_rate=cfg.GENERATOR_LR,
    )
    dataset = DatasetConfig(
        train_rooms=cfg.TRAIN_ROOMS,
        val_rooms=cfg.VAL_ROOMS,
        test_rooms=cfg.TEST_ROOMS,
        scene_duration=cfg.SCENE_DURATION,
    )
    return {
        'scale': cfg.SCALE,
        'seed': cfg.SEED,
        'sim': sim,
        'features': features,
        'encoder': encoder,
        'diffusion': diffusion,
        'dataset': dataset,
    }


def rng_stream(seed: int, *names: Any) -> np.random.Generator:
    """Independent generator for a named sub-stream of a run seed"""
    keys = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)):
            keys.append(int(name) & 0xFFFFFFFF)
        else:
            keys.append(zlib.crc32(str(name).encode('utf-8')))
    return np.random.default_rng(np.random.SeedSequence(keys))

