"""
Artifact input/output: multichannel WAV files, JSON sidecars and CSV tables.

Every writer goes through a temporary file in the destination directory
followed by os.replace, so readers never observe half-written artifacts.
"""

import os
import json
import logging
import tempfile
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import pandas as pd
import soundfile as sf
from scipy.signal import resample_poly

from errors import DatasetError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _ensure_parent(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, (Path,)):
        return str(value)
    if hasattr(value, 'value'):
        # Enum members
        return value.value
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps_json(data: Any) -> str:
    """Deterministic JSON text (sorted keys) for sidecars and metadata"""
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default)


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write bytes through a temporary file and rename into place"""
    path = Path(path)
    _ensure_parent(path)
    fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def write_json(path: PathLike, data: Any) -> Path:
    return atomic_write_bytes(path, dumps_json(data).encode('utf-8'))


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"Missing file: {path}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"Malformed JSON in {path}: {e}")


def write_wav(path: PathLike, samples: np.ndarray, sample_rate: int) -> Path:
    """Write a (channels, samples) array as a 32-bit float WAV"""
    path = Path(path)
    data = np.asarray(samples, dtype=np.float32)
    if data.ndim == 1:
        data = data[np.newaxis, :]
    _ensure_parent(path)
    fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), prefix=f'.{path.stem}.', suffix='.wav')
    os.close(fd)
    try:
        sf.write(tmp_name, data.T, int(sample_rate), subtype='FLOAT', format='WAV')
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def read_wav(path: PathLike, sample_rate: int = None) -> Tuple[np.ndarray, int]:
    """Read a WAV as (channels, samples) float64, optionally resampled"""
    path = Path(path)
    try:
        data, fs = sf.read(str(path), dtype='float64', always_2d=True)
    except RuntimeError as e:
        raise DatasetError(f"Cannot read audio file {path}: {e}")
    data = data.T
    if sample_rate is not None and fs != sample_rate:
        gcd = np.gcd(int(fs), int(sample_rate))
        data = resample_poly(data, int(sample_rate) // gcd, int(fs) // gcd, axis=-1)
        logger.debug(f"Resampled {path.name} from {fs} Hz to {sample_rate} Hz")
        fs = sample_rate
    return data, int(fs)


def sidecar_path(wav_path: PathLike) -> Path:
    return Path(wav_path).with_suffix('.json')


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    return atomic_write_bytes(path, frame.to_csv(index=False, float_format='%.9g').encode('utf-8'))


def read_csv(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Missing file: {path}")
    return pd.read_csv(path)
