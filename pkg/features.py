"""
Scene features for the room encoder: per-channel log-magnitude and
instantaneous-frequency planes of a 4-channel scene, standardized with
training-split statistics.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from audio_io import read_json, write_json
from errors import FeatureError

logger = logging.getLogger(__name__)

MAGNITUDE_FLOOR = 1e-6
SCENE_CHANNELS = 4
PLANES = 2 * SCENE_CHANNELS


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 48000
    window: int = 512
    hop: int = 128
    duration: float = 4.0

    @property
    def bins(self) -> int:
        return self.window // 2 + 1

    @property
    def scene_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def frames(self) -> int:
        return (self.scene_samples - self.window) // self.hop + 1


@dataclass
class NormStats:
    mean: np.ndarray  # (8,)
    std: np.ndarray  # (8,)
    source: str = ''

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(PLANES)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(PLANES)
        if np.any(self.std <= 0):
            raise FeatureError(f"Normalization std must be positive, got {self.std.tolist()}")

    @property
    def digest(self) -> str:
        payload = np.concatenate([self.mean, self.std]).astype('<f8').tobytes()
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_dict(self) -> Dict:
        return {'mean': self.mean, 'std': self.std, 'source': self.source, 'digest': self.digest}

    @classmethod
    def from_dict(cls, data: Dict) -> 'NormStats':
        try:
            return cls(mean=data['mean'], std=data['std'], source=data.get('source', ''))
        except KeyError as e:
            raise FeatureError(f"Normalization statistics missing field {e}")


@dataclass
class SceneTensor:
    data: np.ndarray  # (8, t, f)
    stats_id: str = ''

    @property
    def frame_count(self) -> int:
        return int(self.data.shape[1])

    @property
    def bin_count(self) -> int:
        return int(self.data.shape[2])


def stft(channel: np.ndarray, window: int = 512, hop: int = 128) -> np.ndarray:
    """Periodic-Hann STFT without centering, (frames, window // 2 + 1)"""
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 1:
        raise FeatureError(f"stft expects a single channel, got shape {channel.shape}")
    if channel.size < window:
        raise FeatureError(f"Signal of {channel.size} samples is shorter than the {window}-sample window")
    frames = sliding_window_view(channel, window)[::hop]
    return np.fft.rfft(frames * get_window('hann', window, fftbins=True), axis=-1)


def logmag_if(spectrum: np.ndarray) -> np.ndarray:
    """(2, t, f): log(|X| + 1e-6) and the time-unwrapped phase difference over pi"""
    logmag = np.log(np.abs(spectrum) + MAGNITUDE_FLOOR)
    phase = np.unwrap(np.angle(spectrum), axis=0)
    inst_freq = np.zeros_like(logmag)
    inst_freq[1:] = np.diff(phase, axis=0) / np.pi
    return np.stack([logmag, np.clip(inst_freq, -1.0, 1.0)])


def scene_planes(scene: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Unnormalized (8, t, f) planes of the first scene duration"""
    scene = np.asarray(scene, dtype=np.float64)
    if scene.ndim != 2 or scene.shape[0] != SCENE_CHANNELS:
        raise FeatureError(f"Scene must have {SCENE_CHANNELS} channels, got shape {scene.shape}")
    needed = config.scene_samples
    if scene.shape[1] < needed:
        raise FeatureError(
            f"Scene has {scene.shape[1]} samples, needs {needed} ({config.duration} s at {config.sample_rate} Hz)")
    scene = scene[:, :needed]
    planes = [logmag_if(stft(channel, config.window, config.hop)) for channel in scene]
    return np.concatenate(planes, axis=0)


def dataset_stats(planes: Iterable[np.ndarray], source: str = '') -> NormStats:
    """Per-plane population mean/std over every frame, bin and scene"""
    total = np.zeros(PLANES)
    total_sq = np.zeros(PLANES)
    count = 0
    for item in planes:
        item = np.asarray(item, dtype=np.float64)
        if item.shape[0] != PLANES:
            raise FeatureError(f"Expected {PLANES} planes, got {item.shape[0]}")
        total += item.sum(axis=(1, 2))
        total_sq += (item ** 2).sum(axis=(1, 2))
        count += item.shape[1] * item.shape[2]
    if count == 0:
        raise FeatureError("Normalization statistics need at least one scene")
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    zero = np.nonzero(var <= 1e-20)[0]
    if zero.size:
        raise FeatureError(f"Zero variance in plane(s) {zero.tolist()}")
    return NormStats(mean=mean, std=np.sqrt(var), source=source)


def normalize_planes(planes: np.ndarray, stats: NormStats) -> np.ndarray:
    return (planes - stats.mean[:, None, None]) / stats.std[:, None, None]


def scene_to_tensor(scene: np.ndarray, stats: NormStats, config: FeatureConfig) -> SceneTensor:
    data = normalize_planes(scene_planes(scene, config), stats)
    return SceneTensor(data=data.astype(np.float32), stats_id=stats.digest)


def save_stats(path, stats: NormStats) -> Path:
    return write_json(path, stats.to_dict())


def load_stats(path) -> NormStats:
    return NormStats.from_dict(read_json(path))
