"""
Dataset Pipeline

Paired-scene corpora for contrastive training and generator training:
1. RT-profile sampling from a user CSV or the built-in power-law family
2. Room-size rejection sampling against the Sabine inversion
3. Scene rendering: 1-3 sources convolved with simulated SRIRs per scene
4. SRIR normalization and direct-sound alignment
5. The 15-position evaluation line and its ground-truth SRIRs
"""

import re
import sys
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import chirp, fftconvolve
from tqdm import tqdm

from acoustics_analysis import OCTAVE_CENTERS, toa_estimate
from audio_io import read_csv, read_wav, write_csv, write_json, write_wav
from config import rng_stream
from errors import AnalysisError, ConfigurationError, DatasetError, GeometryError
from room_encoder import embed_scene
from room_sim import (
    GENERATOR_VERSION, SRIR, Infeasible, RoomSpec, SimConfig, array_geometry, make_room,
    random_interior_point, read_room, read_srir, sabine_absorption, simulate_srir, write_room, write_srir,
)
from srir_diffusion import GeneratorExamples, Variant, conditioning_vector, pad_time

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['room_id', 'split', 'room_file', 'scene_a', 'scene_b', 'srir_files',
                    'source_positions', 'receiver_position', 'seed']
EVALUATION_COLUMNS = ['room_id', 'position_id', 'source', 'receiver', 'srir_file']
SPLITS = ('train', 'val', 'test')
SCENE_KEYS = ('a', 'b')
MIN_RT = 0.05
MIN_CORPUS_SIGNALS = 3
MIN_LINE_SPAN = 3.0
LINE_ORIENTATIONS = 16


@dataclass(frozen=True)
class DatasetConfig:
    train_rooms: int = 45000
    val_rooms: int = 2500
    test_rooms: int = 100
    scene_duration: float = 4.0
    margin: float = 0.3
    max_tries: int = 100
    xy_range: Tuple[float, float] = (1.5, 20.0)
    z_range: Tuple[float, float] = (2.5, 8.0)
    max_sources: int = 3
    scene_peak: float = 0.9
    min_source_distance: float = 0.5
    line_count: int = 15
    line_distance: float = 1.0
    line_span: float = 6.0
    corpus_signals: int = 12

    def __post_init__(self):
        for name in ('train_rooms', 'val_rooms', 'test_rooms'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.max_tries < 1:
            raise ConfigurationError(f"max_tries must be >= 1, got {self.max_tries}")
        if not 1 <= self.max_sources:
            raise ConfigurationError(f"max_sources must be >= 1, got {self.max_sources}")
        object.__setattr__(self, 'xy_range', tuple(self.xy_range))
        object.__setattr__(self, 'z_range', tuple(self.z_range))

    def rooms(self, split: str) -> int:
        return {'train': self.train_rooms, 'val': self.val_rooms, 'test': self.test_rooms}[split]


@dataclass
class RtProfile:
    values: np.ndarray  # T60 seconds per band
    bands: Tuple[int, ...] = OCTAVE_CENTERS
    provenance: str = ''

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.bands = tuple(int(b) for b in self.bands)
        if self.values.size != len(self.bands):
            raise DatasetError(f"RT profile has {self.values.size} values for {len(self.bands)} bands")
        if np.any(~np.isfinite(self.values)) or np.any(self.values <= MIN_RT):
            raise DatasetError(f"RT profile values must exceed {MIN_RT} s, got {self.values.tolist()}")


@dataclass
class Scene:
    audio: np.ndarray  # (4, N), peak-normalized
    sources: np.ndarray  # (K, 3)
    receiver: np.ndarray  # (3,)
    srirs: List[SRIR] = field(default_factory=list)
    signal_ids: Tuple[int, ...] = ()

    @property
    def source_count(self) -> int:
        return int(self.sources.shape[0])


@dataclass
class ScenePair:
    room_id: str
    room: RoomSpec
    scenes: Dict[str, Scene]

    @property
    def scene_a(self) -> Scene:
        return self.scenes['a']

    @property
    def scene_b(self) -> Scene:
        return self.scenes['b']


# RT profiles ---------------------------------------------------------------------------

def _band_column(name: str) -> Optional[int]:
    numbers = re.findall(r"\d+(?:\.\d+)?", str(name))
    return int(round(float(numbers[-1]))) if numbers else None


def load_rt_profiles(path, bands: Sequence[int] = OCTAVE_CENTERS) -> List[RtProfile]:
    """
    Profiles from a CSV whose header names band centres (`125`, `rt_125`,
    `T60_125Hz`, ...); columns for bands outside `bands` are ignored.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Missing RT profile file: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, skip_blank_lines=True)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise DatasetError(f"Malformed RT profile file {path}: {e}")
    columns = {}
    for column in frame.columns:
        center = _band_column(column)
        if center is not None:
            columns[center] = column
    missing = [b for b in bands if b not in columns]
    if missing:
        raise DatasetError(f"{path}: header lacks band(s) {missing}, found {list(frame.columns)}")
    if frame.empty:
        raise DatasetError(f"RT profile file {path} has no rows")

    profiles = []
    for index, row in frame.iterrows():
        line = int(index) + 2  # header is line 1
        try:
            values = [float(row[columns[b]]) for b in bands]
        except (TypeError, ValueError):
            raise DatasetError(f"{path}:{line}: non-numeric RT value in {row.tolist()}")
        try:
            profiles.append(RtProfile(values=values, bands=bands, provenance=f'{path.name}:{line}'))
        except DatasetError as e:
            raise DatasetError(f"{path}:{line}: {e}")
    logger.info(f"Loaded {len(profiles)} RT profiles from {path}")
    return profiles


def synthetic_rt_profile(t_mid: float, gamma: float, bands: Sequence[int] = OCTAVE_CENTERS) -> RtProfile:
    """T60(b) = t_mid * (f_b / 1000) ** gamma"""
    centers = np.asarray(bands, dtype=np.float64)
    return RtProfile(values=t_mid * (centers / 1000.0) ** gamma, bands=bands,
                     provenance=f'synthetic t_mid={t_mid:.4f} gamma={gamma:.4f}')


def draw_rt_profile(profiles: Union[None, str, Path, Sequence[RtProfile]], rng: np.random.Generator,
                    bands: Sequence[int] = OCTAVE_CENTERS) -> RtProfile:
    """Uniform draw from the given profiles (or file); synthetic family when none are given"""
    if profiles is None:
        return synthetic_rt_profile(rng.uniform(0.2, 1.5), rng.uniform(-0.35, 0.0), bands)
    if isinstance(profiles, (str, Path)):
        profiles = load_rt_profiles(profiles, bands)
    if len(profiles) == 0:
        raise DatasetError("RT profile list is empty")
    return profiles[int(rng.integers(len(profiles)))]


# Rooms ----------------------------------------------------------------------------------

def draw_room(rt_profile: RtProfile, rng: np.random.Generator, max_tries: int = 100,
              perturbation: float = 0.02, xy_range: Sequence[float] = (1.5, 20.0),
              z_range: Sequence[float] = (2.5, 8.0)) -> Tuple[RoomSpec, np.ndarray]:
    """First room size whose Sabine inversion of the profile is feasible"""
    if max_tries < 1:
        raise ConfigurationError(f"max_tries must be >= 1, got {max_tries}")
    last = None
    for attempt in range(max_tries):
        dims = (rng.uniform(*xy_range), rng.uniform(*xy_range), rng.uniform(*z_range))
        seed = int(rng.integers(2 ** 31))
        try:
            room = make_room(dims, perturbation, seed, rt_profile.bands)
        except GeometryError as e:
            logger.debug(f"draw_room: {e}")
            continue
        alpha = sabine_absorption(rt_profile.values, room)
        if isinstance(alpha, Infeasible):
            last = alpha.reason
            continue
        logger.debug(f"draw_room: accepted {tuple(round(d, 2) for d in dims)} after {attempt + 1} draw(s)")
        return room.with_absorption(alpha), alpha
    raise DatasetError(
        f"No feasible room in {max_tries} draws for RT profile {np.round(rt_profile.values, 3).tolist()} "
        f"({rt_profile.provenance}); last: {last}")


# Corpus ---------------------------------------------------------------------------------

def make_synthetic_corpus(count: int, sample_rate: int, duration: float, seed: int = 0) -> List[np.ndarray]:
    """
    Deterministic stand-in for a speech/music corpus: alternating gated
    colored noise and gated linear chirps, each `duration` seconds long.
    """
    rng = rng_stream(seed, 'synthetic-corpus')
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    nyquist = sample_rate / 2.0
    signals = []
    for i in range(count):
        if i % 2 == 0:
            slope = rng.uniform(0.0, 1.5)
            spectrum = np.fft.rfft(rng.standard_normal(n))
            freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
            spectrum /= np.maximum(freqs, 20.0) ** (slope / 2.0)
            signal = np.fft.irfft(spectrum, n)
        else:
            f0 = rng.uniform(50.0, 0.1 * nyquist)
            f1 = rng.uniform(0.5 * nyquist, 0.9 * nyquist)
            signal = chirp(t, f0=f0, t1=t[-1], f1=f1, method='linear')
        # on/off gating leaves decays audible between bursts
        rate = rng.uniform(1.5, 4.0)
        gate = (np.sin(2.0 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)) > -0.2).astype(np.float64)
        signal = signal * gate
        signals.append(signal / np.max(np.abs(signal)))
    return signals


def load_corpus(corpus_dir, sample_rate: int, duration: float) -> List[np.ndarray]:
    """Mono signals of at least `duration` seconds from every WAV/FLAC file in a directory"""
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise DatasetError(f"Corpus directory not found: {corpus_dir}")
    needed = int(round(duration * sample_rate))
    signals = []
    for path in sorted(p for p in corpus_dir.iterdir() if p.suffix.lower() in ('.wav', '.flac')):
        data, _ = read_wav(path, sample_rate)
        mono = data.mean(axis=0)
        if mono.size < needed:
            logger.warning(f"Skipping {path.name}: {mono.size / sample_rate:.2f} s is shorter than {duration} s")
            continue
        if not np.any(mono):
            logger.warning(f"Skipping {path.name}: silent")
            continue
        signals.append(mono)
    if len(signals) < MIN_CORPUS_SIGNALS:
        raise DatasetError(
            f"Corpus {corpus_dir} has {len(signals)} usable signals of >= {duration} s, need {MIN_CORPUS_SIGNALS}")
    logger.info(f"Loaded {len(signals)} corpus signals from {corpus_dir}")
    return signals


# Scenes ---------------------------------------------------------------------------------

def mix_sources(srirs: Sequence[SRIR], signals: Sequence[np.ndarray], length: int) -> np.ndarray:
    """Sum over sources of full convolutions truncated to `length`, before normalization"""
    if len(srirs) != len(signals):
        raise DatasetError(f"{len(srirs)} SRIRs for {len(signals)} signals")
    mix = np.zeros((4, length))
    for srir, signal in zip(srirs, signals):
        dry = np.asarray(signal, dtype=np.float64)[:length]
        wet = fftconvolve(dry[np.newaxis, :], srir.samples.astype(np.float64), axes=-1)[:, :length]
        mix[:, :wet.shape[1]] += wet
    return mix


def _draw_sources(room: RoomSpec, receiver: np.ndarray, count: int, rng: np.random.Generator,
                  config: DatasetConfig) -> np.ndarray:
    sources = []
    for _ in range(count):
        for _ in range(config.max_tries):
            point = random_interior_point(room, rng, config.margin)
            if np.linalg.norm(point - receiver) >= config.min_source_distance:
                break
        else:
            raise GeometryError(f"No source position {config.min_source_distance} m from the receiver")
        sources.append(point)
    return np.array(sources)


def render_scene(room: RoomSpec, corpus: Sequence[np.ndarray], rng: np.random.Generator, sim_config: SimConfig,
                 config: DatasetConfig) -> Scene:
    length = int(round(config.scene_duration * sim_config.sample_rate))
    count = int(rng.integers(1, config.max_sources + 1))
    receiver = random_interior_point(room, rng, config.margin)
    sources = _draw_sources(room, receiver, count, rng, config)
    array = array_geometry(receiver, sim_config.array_radius)
    srirs = [simulate_srir(room, s, array, sim_config, seed=int(rng.integers(2 ** 31))) for s in sources]
    signal_ids = tuple(int(i) for i in rng.choice(len(corpus), size=count, replace=False))
    mix = mix_sources(srirs, [corpus[i] for i in signal_ids], length)
    peak = np.max(np.abs(mix))
    if peak <= 0.0:
        raise DatasetError("Rendered scene is silent")
    return Scene(audio=mix * (config.scene_peak / peak), sources=sources, receiver=receiver, srirs=srirs,
                 signal_ids=signal_ids)


def render_scene_pair(room: RoomSpec, corpus: Sequence[np.ndarray], rng: np.random.Generator,
                      sim_config: SimConfig, config: DatasetConfig, room_id: str = '') -> ScenePair:
    """Two independent scenes (own sources, own receiver) in the same room"""
    if len(corpus) < MIN_CORPUS_SIGNALS:
        raise DatasetError(f"Corpus has {len(corpus)} signals, need at least {MIN_CORPUS_SIGNALS}")
    length = int(round(config.scene_duration * sim_config.sample_rate))
    short = [i for i, s in enumerate(corpus) if len(s) < length]
    if short:
        raise DatasetError(f"Corpus signals {short} are shorter than {config.scene_duration} s")
    if len(corpus) < config.max_sources:
        raise DatasetError(f"Corpus has {len(corpus)} signals for up to {config.max_sources} sources")
    scenes = {key: render_scene(room, corpus, rng, sim_config, config) for key in SCENE_KEYS}
    return ScenePair(room_id=room_id, room=room, scenes=scenes)


# SRIR preparation -------------------------------------------------------------------------

def normalize_align(srir: SRIR, variant: Union[str, Variant] = Variant.PROPOSED) -> SRIR:
    """Max-abs normalization; unless WITH_TOA, shift so the direct peak sits at sample 0"""
    variant = Variant(variant)
    samples = np.asarray(srir.samples, dtype=np.float64)
    peak = np.max(np.abs(samples))
    if peak <= 0.0:
        raise AnalysisError("Cannot normalize a silent SRIR")
    samples = samples / peak
    toa = toa_estimate(samples, srir.sample_rate)
    aligned = srir.aligned
    if variant != Variant.WITH_TOA:
        shift = int(round(toa * srir.sample_rate))
        if shift:
            samples = np.concatenate([samples[:, shift:], np.zeros((samples.shape[0], shift))], axis=1)
        toa = srir.toa_seconds + toa if srir.aligned else toa
        aligned = True
    return SRIR(samples=samples.astype(np.float32), sample_rate=srir.sample_rate, source=srir.source,
                receiver=srir.receiver, aligned=aligned, toa_seconds=float(toa), metadata=dict(srir.metadata))


# Evaluation line ----------------------------------------------------------------------------

def _line_interval(room: RoomSpec, point: np.ndarray, direction: np.ndarray, margin: float) -> Tuple[float, float]:
    """Parameter range t with point + t * direction at least `margin` inside every wall"""
    lo, hi = -np.inf, np.inf
    slack = room.signed_distances(point) - margin
    rate = room.normals @ direction
    for s, r in zip(slack, rate):
        if abs(r) < 1e-12:
            if s < 0:
                return 0.0, 0.0
            continue
        bound = -s / r
        if r > 0:
            lo = max(lo, bound)
        else:
            hi = min(hi, bound)
    return lo, hi


def line_positions(source: Sequence[float], room: RoomSpec, count: int = 15, distance: float = 1.0,
                   span: float = 6.0, margin: float = 0.3) -> np.ndarray:
    """
    `count` equidistant receivers on a horizontal segment at the source's
    height whose closest point is `distance` from the source. The
    orientation with the widest fit is used; the span shrinks to fit with
    a warning and must stay at least 3 m.
    """
    source = np.asarray(source, dtype=np.float64).reshape(3)
    if count < 2:
        raise ConfigurationError(f"Evaluation line needs at least 2 positions, got {count}")
    best = (0.0, None, None)
    for k in range(LINE_ORIENTATIONS):
        angle = np.pi * k / LINE_ORIENTATIONS
        direction = np.array([np.cos(angle), np.sin(angle), 0.0])
        for side in (1.0, -1.0):
            offset = side * np.array([-direction[1], direction[0], 0.0])
            closest = source + distance * offset
            if not room.contains(closest, margin):
                continue
            lo, hi = _line_interval(room, closest, direction, margin)
            fit = 2.0 * min(-lo, hi)
            if fit >= span:
                best = (span, closest, direction)
                break
            if fit > best[0]:
                best = (fit, closest, direction)
        if best[0] >= span:
            break
    fit, closest, direction = best
    if closest is None or fit < MIN_LINE_SPAN:
        raise GeometryError(
            f"Evaluation line of >= {MIN_LINE_SPAN} m does not fit around source {source.round(3).tolist()} "
            f"(widest fit {fit:.2f} m)")
    if fit < span:
        logger.warning(f"Evaluation line clipped from {span} m to {fit:.2f} m to fit the room")
    offsets = np.linspace(-fit / 2.0, fit / 2.0, count)
    return closest[np.newaxis, :] + offsets[:, None] * direction[np.newaxis, :]


# Dataset build -------------------------------------------------------------------------------

def _point(values) -> List[float]:
    return [round(float(v), 6) for v in values]


def _write_room_pair(root: Path, split: str, room_id: str, pair: ScenePair, sample_rate: int,
                     seed: int) -> Dict:
    room_file = Path('rooms') / f'{room_id}.json'
    write_room(root / room_file, pair.room)
    row = {'room_id': room_id, 'split': split, 'room_file': room_file.as_posix(), 'seed': seed}
    srir_files, sources, receivers = {}, {}, {}
    for key, scene in pair.scenes.items():
        scene_file = Path('scenes') / f'{room_id}_{key}.wav'
        write_wav(root / scene_file, scene.audio, sample_rate)
        row[f'scene_{key}'] = scene_file.as_posix()
        srir_files[key] = []
        for i, srir in enumerate(scene.srirs):
            srir_file = Path('srirs') / f'{room_id}_{key}_{i}.wav'
            write_srir(root / srir_file, srir, {'room_id': room_id, 'scene': key})
            srir_files[key].append(srir_file.as_posix())
        sources[key] = [_point(s) for s in scene.sources]
        receivers[key] = _point(scene.receiver)
    row['srir_files'] = json.dumps(srir_files, sort_keys=True)
    row['source_positions'] = json.dumps(sources, sort_keys=True)
    row['receiver_position'] = json.dumps(receivers, sort_keys=True)
    return row


def _write_evaluation_line(root: Path, room_id: str, room: RoomSpec, rng: np.random.Generator,
                           sim_config: SimConfig, config: DatasetConfig) -> List[Dict]:
    for _ in range(config.max_tries):
        source = random_interior_point(room, rng, config.margin)
        try:
            receivers = line_positions(source, room, config.line_count, config.line_distance, config.line_span,
                                       config.margin)
            break
        except GeometryError:
            continue
    else:
        logger.warning(f"{room_id}: no evaluation line fits, room skipped for evaluation")
        return []
    rows = []
    for j, receiver in enumerate(receivers):
        array = array_geometry(receiver, sim_config.array_radius)
        srir = simulate_srir(room, source, array, sim_config, seed=int(rng.integers(2 ** 31)))
        srir_file = Path('evaluation') / f'{room_id}_p{j:02d}.wav'
        write_srir(root / srir_file, srir, {'room_id': room_id, 'position_id': j})
        rows.append({'room_id': room_id, 'position_id': j, 'source': json.dumps(_point(source)),
                     'receiver': json.dumps(_point(receiver)), 'srir_file': srir_file.as_posix()})
    return rows


def build_dataset(out_dir, config: DatasetConfig, sim_config: SimConfig, seed: int, corpus_dir=None,
                  profile_file=None, test_profile_file=None, scale: str = '') -> Path:
    """
    Render every split into `out_dir` and write manifest.csv, evaluation.csv
    and dataset.json. Each room draws from its own named random stream, so
    the output depends only on the seed and the configuration.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    fs = sim_config.sample_rate
    if corpus_dir is not None:
        corpus = load_corpus(corpus_dir, fs, config.scene_duration)
    else:
        logger.info(f"No corpus directory given, using {config.corpus_signals} synthetic signals")
        corpus = make_synthetic_corpus(config.corpus_signals, fs, config.scene_duration, seed)
    profiles = load_rt_profiles(profile_file, sim_config.bands) if profile_file else None
    test_profiles = load_rt_profiles(test_profile_file, sim_config.bands) if test_profile_file else profiles

    rows, evaluation = [], []
    jobs = [(split, k) for split in SPLITS for k in range(config.rooms(split))]
    progress = tqdm(jobs, desc='rooms', disable=not sys.stderr.isatty())
    for split, k in progress:
        room_id = f'{split}-{k:05d}'
        rng = rng_stream(seed, 'room', room_id)
        profile = draw_rt_profile(test_profiles if split == 'test' else profiles, rng, sim_config.bands)
        room, _ = draw_room(profile, rng, config.max_tries, sim_config.perturbation, config.xy_range,
                            config.z_range)
        pair = render_scene_pair(room, corpus, rng, sim_config, config, room_id)
        rows.append(_write_room_pair(root, split, room_id, pair, fs, seed))
        if split == 'test':
            evaluation.extend(_write_evaluation_line(root, room_id, room, rng, sim_config, config))
        logger.debug(f"{room_id}: {pair.scene_a.source_count}+{pair.scene_b.source_count} sources, "
                     f"RT {np.round(profile.values, 2).tolist()}")

    manifest_path = write_csv(root / 'manifest.csv', pd.DataFrame(rows, columns=MANIFEST_COLUMNS))
    write_csv(root / 'evaluation.csv', pd.DataFrame(evaluation, columns=EVALUATION_COLUMNS))
    write_json(root / 'dataset.json', {
        'scale': scale,
        'seed': int(seed),
        'sample_rate': int(fs),
        'srir_duration': sim_config.duration,
        'scene_duration': config.scene_duration,
        'counts': {split: config.rooms(split) for split in SPLITS},
        'evaluation_positions': len(evaluation),
        'generator_version': GENERATOR_VERSION,
        'simulation': asdict(sim_config),
        'dataset': asdict(config),
        'profile_file': str(profile_file) if profile_file else None,
        'test_profile_file': str(test_profile_file) if test_profile_file else None,
    })
    logger.info(f"Dataset written to {root}: {len(rows)} rooms, {len(evaluation)} evaluation SRIRs")
    return manifest_path


# Manifest readers ------------------------------------------------------------------------------

def load_manifest(manifest_path) -> pd.DataFrame:
    """Manifest rows with every referenced file checked to exist"""
    manifest_path = Path(manifest_path)
    frame = read_csv(manifest_path)
    missing_columns = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing_columns:
        raise DatasetError(f"{manifest_path}: missing column(s) {missing_columns}")
    root = manifest_path.parent
    missing = []
    for _, row in frame.iterrows():
        files = [row['room_file'], row['scene_a'], row['scene_b']]
        files += [f for group in json.loads(row['srir_files']).values() for f in group]
        missing.extend(f for f in files if not (root / f).exists())
    if missing:
        raise DatasetError(f"{manifest_path}: {len(missing)} referenced file(s) missing, e.g. {missing[:3]}")
    overlap = frame.groupby('room_id')['split'].nunique()
    if (overlap > 1).any():
        raise DatasetError(f"{manifest_path}: rooms in more than one split: {overlap[overlap > 1].index.tolist()}")
    return frame


def load_scene_pairs(manifest_path, split: str, sample_rate: int = None) -> List[Tuple[str, np.ndarray, np.ndarray]]:
    """(room_id, scene_a, scene_b) for every room of a split"""
    manifest_path = Path(manifest_path)
    frame = load_manifest(manifest_path)
    root = manifest_path.parent
    pairs = []
    for _, row in frame[frame['split'] == split].iterrows():
        scene_a, _ = read_wav(root / row['scene_a'], sample_rate)
        scene_b, _ = read_wav(root / row['scene_b'], sample_rate)
        pairs.append((str(row['room_id']), scene_a, scene_b))
    logger.info(f"Loaded {len(pairs)} {split} scene pairs from {manifest_path}")
    return pairs


def load_room(manifest_path, room_id: str) -> RoomSpec:
    manifest_path = Path(manifest_path)
    frame = read_csv(manifest_path)
    match = frame[frame['room_id'] == room_id]
    if match.empty:
        raise DatasetError(f"Room {room_id} not in {manifest_path}")
    return read_room(manifest_path.parent / match.iloc[0]['room_file'])


def generator_examples(manifest_path, split: str, encoder, feature_config, stats, config) -> GeneratorExamples:
    """
    Ground-truth SRIRs of a split paired with the frozen-encoder embedding
    of each scene of their room, prepared for the configured variant.
    """
    manifest_path = Path(manifest_path)
    frame = load_manifest(manifest_path)
    root = manifest_path.parent
    responses, embeddings, vectors = [], [], []
    for _, row in frame[frame['split'] == split].iterrows():
        h = {}
        for key in SCENE_KEYS:
            scene, _ = read_wav(root / row[f'scene_{key}'], feature_config.sample_rate)
            h[key] = embed_scene(scene, encoder, feature_config, stats)
        for files in json.loads(row["srir_files"]).values():
            for srir_file in files:
                srir = read_srir(root / srir_file)
                if srir.sample_rate != config.sample_rate or srir.length != config.length:
                    raise ConfigurationError(
                        f"{srir_file}: {srir.length} samples at {srir.sample_rate} Hz, generator expects "
                        f"{config.length} at {config.sample_rate} Hz")
                prepared = pad_time(normalize_align(srir, config.variant).samples, config.padded_length)
                v = conditioning_vector(srir.source, srir.receiver)
                for scene_key in SCENE_KEYS:
                    responses.append(prepared)
                    embeddings.append(h[scene_key])
                    vectors.append(v)
    if not responses:
        return GeneratorExamples(responses=np.zeros((0, config.channels, config.padded_length)),
                                 embeddings=np.zeros((0, config.h_dim)), vectors=np.zeros((0, 3)))
    logger.info(f"{len(responses)} {split} generator examples from {manifest_path}")
    return GeneratorExamples(responses=np.stack(responses).astype(np.float64),
                             embeddings=np.stack(embeddings).astype(np.float64),
                             vectors=np.stack(vectors))


def load_evaluation(dataset_dir) -> pd.DataFrame:
    """Evaluation line rows with source/receiver decoded to lists"""
    frame = read_csv(Path(dataset_dir) / 'evaluation.csv')
    for column in ('source', 'receiver'):
        frame[column] = frame[column].apply(json.loads)
    return frame
