"""
Room Simulation Module

Frequency-banded image source method for slightly perturbed hexahedron
rooms:
1. Room construction from tilted/jittered wall planes and Sabine absorption
2. Image source enumeration with visibility back-tracing
3. Tetrahedral cardioid array rendering with fractional delays
4. Energy-matched diffuse tail beyond the image-source horizon

Walls are planes with inward unit normals; a point p is inside the room iff
n . p >= offset for every wall. Wall order: x0, x1, y0, y1, z0, z1.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import ConvexHull

from acoustics_analysis import OCTAVE_CENTERS, SPEED_OF_SOUND, apply_band_filter, band_filters
from audio_io import read_json, read_wav, sidecar_path, write_json, write_wav
from config import rng_stream
from errors import DatasetError, GeometryError

logger = logging.getLogger(__name__)

GENERATOR_VERSION = 'hexa-ism/1 fd=hann-sinc-32'
WALL_NAMES = ('x0', 'x1', 'y0', 'y1', 'z0', 'z1')
FRACTIONAL_DELAY_TAPS = 32
ARRAY_RADIUS = 0.02
MAX_PERTURBATION = 0.05
TAIL_MATCH_SECONDS = 0.010
TAIL_FADE_SECONDS = 0.005
SABINE_CONSTANT = 0.161
T60_DECAY = 6.91  # ln(10**3)

# Regular tetrahedron, one capsule toward +z
TETRAHEDRON = np.array([
    [0.0, 0.0, 1.0],
    [np.sqrt(8.0 / 9.0), 0.0, -1.0 / 3.0],
    [-np.sqrt(2.0 / 9.0), np.sqrt(2.0 / 3.0), -1.0 / 3.0],
    [-np.sqrt(2.0 / 9.0), -np.sqrt(2.0 / 3.0), -1.0 / 3.0],
])


def octave_bands_for(sample_rate: float) -> Tuple[int, ...]:
    """Octave centers whose upper band edge lies below Nyquist"""
    return tuple(c for c in OCTAVE_CENTERS if c * np.sqrt(2.0) < sample_rate / 2.0)


@dataclass(frozen=True)
class SimConfig:
    sample_rate: int = 48000
    duration: float = 0.5
    max_order: int = 12
    tail: bool = True
    perturbation: float = 0.02
    bands: Tuple[int, ...] = OCTAVE_CENTERS
    seed: int = 0
    speed_of_sound: float = SPEED_OF_SOUND
    array_radius: float = ARRAY_RADIUS

    @property
    def length(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass
class Infeasible:
    """Sabine inversion needs an absorption outside (0, 1]"""
    alpha: np.ndarray
    reason: str


@dataclass
class RoomSpec:
    normals: np.ndarray  # (6, 3) inward unit normals
    offsets: np.ndarray  # (6,)
    nominal_dims: Tuple[float, float, float]
    absorption: Optional[np.ndarray] = None  # (6, bands)
    bands: Tuple[int, ...] = OCTAVE_CENTERS
    seed: int = 0
    perturbation: float = 0.0

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(6, 3)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(6)
        self.nominal_dims = tuple(float(d) for d in self.nominal_dims)
        self.bands = tuple(int(b) for b in self.bands)
        if self.absorption is not None:
            alpha = np.asarray(self.absorption, dtype=np.float64)
            if alpha.ndim == 1:
                alpha = np.tile(alpha, (6, 1))
            if alpha.shape != (6, len(self.bands)):
                raise GeometryError(
                    f"Absorption shape {alpha.shape} does not match 6 walls x {len(self.bands)} bands")
            if np.any(alpha <= 0.0) or np.any(alpha > 1.0):
                raise GeometryError("Absorption coefficients must lie in (0, 1]")
            self.absorption = alpha

    @property
    def vertices(self) -> np.ndarray:
        """8 corners as triple intersections of one x, one y and one z wall"""
        corners = []
        for i in (0, 1):
            for j in (2, 3):
                for k in (4, 5):
                    planes = [i, j, k]
                    corners.append(np.linalg.solve(self.normals[planes], self.offsets[planes]))
        return np.array(corners)

    def wall_vertices(self, wall: int) -> np.ndarray:
        axis, side = divmod(wall, 2)
        index = np.array([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        return self.vertices[index[:, axis] == side]

    @property
    def volume(self) -> float:
        return float(ConvexHull(self.vertices).volume)

    @property
    def surface_area(self) -> float:
        return float(ConvexHull(self.vertices).area)

    @property
    def wall_areas(self) -> np.ndarray:
        areas = []
        for w in range(6):
            quad = self.wall_vertices(w)
            # corners come in (a, b) x (c, d) order: 0-1-3-2 walks the rim
            a, b, c, d = quad[0], quad[1], quad[3], quad[2]
            areas.append(0.5 * np.linalg.norm(np.cross(c - a, d - b)))
        return np.array(areas)

    def signed_distances(self, points: np.ndarray) -> np.ndarray:
        """(..., 6) distances to each wall plane, positive inside"""
        return np.asarray(points, dtype=np.float64) @ self.normals.T - self.offsets

    def contains(self, point: Sequence[float], margin: float = 0.0) -> bool:
        return bool(np.all(self.signed_distances(point) >= margin))

    def with_absorption(self, alpha: np.ndarray) -> 'RoomSpec':
        return replace(self, absorption=np.asarray(alpha, dtype=np.float64))

    def reflection_gains(self) -> np.ndarray:
        """(6, bands) amplitude factor per bounce, sqrt(1 - alpha)"""
        if self.absorption is None:
            return np.ones((6, len(self.bands)))
        return np.sqrt(1.0 - self.absorption)


@dataclass
class MicArray:
    center: np.ndarray
    capsule_offsets: np.ndarray
    look_directions: np.ndarray
    pattern: str = 'cardioid'

    @property
    def positions(self) -> np.ndarray:
        return self.center[np.newaxis, :] + self.capsule_offsets


@dataclass
class ImageSource:
    position: np.ndarray
    order: int
    wall_sequence: Tuple[int, ...]
    band_gains: np.ndarray
    # Reorderings of the same reflections that land on the same position
    # (mirrors across perpendicular walls commute)
    alternates: Tuple[Tuple[int, ...], ...] = ()


@dataclass
class SRIR:
    samples: np.ndarray  # (4, L)
    sample_rate: int
    source: np.ndarray
    receiver: np.ndarray
    aligned: bool = False
    toa_seconds: float = 0.0
    metadata: Dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return int(self.samples.shape[-1])

    def sidecar(self) -> Dict:
        data = dict(self.metadata)
        data.update({
            'sample_rate': int(self.sample_rate),
            'source': [float(v) for v in self.source],
            'receiver': [float(v) for v in self.receiver],
            'aligned': bool(self.aligned),
            'toa_seconds': float(self.toa_seconds),
        })
        return data


# Array ------------------------------------------------------------------------------

def array_geometry(center: Sequence[float], radius: float = ARRAY_RADIUS) -> MicArray:
    """Tetrahedral array of radially pointing cardioids"""
    if radius <= 0:
        raise GeometryError(f"Array radius must be positive, got {radius}")
    looks = TETRAHEDRON / np.linalg.norm(TETRAHEDRON, axis=1, keepdims=True)
    return MicArray(
        center=np.asarray(center, dtype=np.float64).reshape(3),
        capsule_offsets=looks * radius,
        look_directions=looks,
    )


def _cardioid(look: np.ndarray, incident: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + incident @ look)


def cardioid_gain(look: Sequence[float], incident: Sequence[float]) -> float:
    """0.5 (1 + look . incident); incident points from the capsule toward the arrival"""
    look = np.asarray(look, dtype=np.float64)
    incident = np.asarray(incident, dtype=np.float64)
    for name, v in (('look', look), ('incident', incident)):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise GeometryError(f"cardioid_gain: {name} vector is not unit-norm (|v| = {np.linalg.norm(v):.6g})")
    return float(np.clip(_cardioid(look, incident), 0.0, 1.0))


# Room construction -------------------------------------------------------------------

def _shoebox_planes(dims: Sequence[float]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, y, z = dims
    normals = np.array([
        [1, 0, 0], [-1, 0, 0],
        [0, 1, 0], [0, -1, 0],
        [0, 0, 1], [0, 0, -1],
    ], dtype=np.float64)
    offsets = np.array([0.0, -x, 0.0, -y, 0.0, -z])
    centers = np.array([
        [0, y / 2, z / 2], [x, y / 2, z / 2],
        [x / 2, 0, z / 2], [x / 2, y, z / 2],
        [x / 2, y / 2, 0], [x / 2, y / 2, z],
    ])
    return normals, offsets, centers


def _is_valid_hexahedron(room: RoomSpec, nominal_volume: float) -> bool:
    try:
        corners = room.vertices
    except np.linalg.LinAlgError:
        return False
    if np.any(room.signed_distances(corners) < -1e-9):
        return False
    try:
        volume = room.volume
    except Exception:
        return False
    return abs(volume - nominal_volume) <= 0.2 * nominal_volume


def make_room(nominal_dims: Sequence[float], perturbation: float = 0.02, seed: int = 0,
              bands: Sequence[int] = OCTAVE_CENTERS, max_tries: int = 100) -> RoomSpec:
    """
    Perturbed hexahedron: each shoebox wall plane is tilted about its centre
    by angles in [-perturbation, +perturbation] rad and shifted along its
    normal by up to perturbation * dim. Walls stay planar by construction.
    """
    if not 0.0 <= perturbation <= MAX_PERTURBATION:
        raise GeometryError(f"Perturbation must lie in [0, {MAX_PERTURBATION}], got {perturbation}")
    dims = np.asarray(nominal_dims, dtype=np.float64)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise GeometryError(f"Room dimensions must be three positive lengths, got {nominal_dims}")
    normals0, offsets0, centers = _shoebox_planes(dims)
    if perturbation == 0.0:
        return RoomSpec(normals0, offsets0, tuple(dims), bands=tuple(bands), seed=seed, perturbation=0.0)

    rng = rng_stream(seed, 'make_room')
    nominal_volume = float(np.prod(dims))
    for attempt in range(max_tries):
        normals = np.empty_like(normals0)
        offsets = np.empty_like(offsets0)
        for w in range(6):
            axis = w // 2
            tangents = [np.eye(3)[a] for a in range(3) if a != axis]
            tilt = rng.uniform(-perturbation, perturbation, size=2)
            n = normals0[w] + np.tan(tilt[0]) * tangents[0] + np.tan(tilt[1]) * tangents[1]
            n /= np.linalg.norm(n)
            shift = rng.uniform(-1.0, 1.0) * perturbation * dims[axis]
            normals[w] = n
            offsets[w] = n @ centers[w] + shift
        room = RoomSpec(normals, offsets, tuple(dims), bands=tuple(bands), seed=seed, perturbation=perturbation)
        if _is_valid_hexahedron(room, nominal_volume):
            return room
        logger.debug(f"make_room: rejected draw {attempt} for dims {tuple(dims)}")
    raise GeometryError(f"No valid hexahedron for dims {tuple(dims)} after {max_tries} draws")


def sabine_absorption(rt_profile: Sequence[float], room: RoomSpec) -> Union[np.ndarray, Infeasible]:
    """Uniform-per-wall alpha(b) = 0.161 V / (S RT(b)), or Infeasible outside (0, 1]"""
    rt = np.asarray(rt_profile, dtype=np.float64)
    if np.any(rt <= 0):
        raise GeometryError(f"RT profile must be positive in every band, got {rt.tolist()}")
    alpha = SABINE_CONSTANT * room.volume / (room.surface_area * rt)
    if np.any(alpha <= 0.0) or np.any(alpha > 1.0):
        return Infeasible(alpha=alpha, reason=f"alpha range [{alpha.min():.3f}, {alpha.max():.3f}] outside (0, 1]")
    return alpha


def sabine_rt(room: RoomSpec) -> np.ndarray:
    """Per-band Sabine RT of the room's mean absorption"""
    if room.absorption is None:
        raise GeometryError("Room has no absorption assigned")
    areas = room.wall_areas
    mean_alpha = (areas[:, None] * room.absorption).sum(axis=0) / areas.sum()
    return SABINE_CONSTANT * room.volume / (room.surface_area * mean_alpha)


def random_interior_point(room: RoomSpec, rng: np.random.Generator, margin: float = 0.3,
                          max_tries: int = 1000) -> np.ndarray:
    corners = room.vertices
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    for _ in range(max_tries):
        p = rng.uniform(lo, hi)
        if room.contains(p, margin):
            return p
    raise GeometryError(f"No interior point with {margin} m wall margin found in {max_tries} draws")


def room_to_dict(room: RoomSpec) -> Dict:
    return {
        'generator_version': GENERATOR_VERSION,
        'walls': WALL_NAMES,
        'normals': room.normals,
        'offsets': room.offsets,
        'absorption': room.absorption,
        'bands': room.bands,
        'nominal_dims': room.nominal_dims,
        'seed': room.seed,
        'perturbation': room.perturbation,
        'volume': room.volume,
        'surface_area': room.surface_area,
    }


def room_from_dict(data: Dict) -> RoomSpec:
    try:
        return RoomSpec(
            normals=data['normals'],
            offsets=data['offsets'],
            nominal_dims=data['nominal_dims'],
            absorption=data.get('absorption'),
            bands=data.get('bands', OCTAVE_CENTERS),
            seed=data.get('seed', 0),
            perturbation=data.get('perturbation', 0.0),
        )
    except KeyError as e:
        raise DatasetError(f"Room description is missing field {e}")


def write_room(path, room: RoomSpec) -> Path:
    return write_json(path, room_to_dict(room))


def read_room(path) -> RoomSpec:
    return room_from_dict(read_json(path))


# Image sources ------------------------------------------------------------------------

def _mirror(points: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    distance = points @ normal - offset
    return points - 2.0 * distance[:, None] * normal


@dataclass
class _ImageLevel:
    positions: np.ndarray  # (M, 3)
    sequences: np.ndarray  # (M, order)
    gains: np.ndarray  # (M, bands)


def _enumerate_levels(room: RoomSpec, source: np.ndarray, max_order: int) -> List[_ImageLevel]:
    """Mirror sequences level by level, skipping repeated walls and walls an image lies behind"""
    reflect = room.reflection_gains()
    levels = [_ImageLevel(source[None, :].copy(), np.zeros((1, 0), dtype=np.int64),
                          np.ones((1, reflect.shape[1])))]
    for order in range(1, max_order + 1):
        prev = levels[-1]
        distance = room.signed_distances(prev.positions)
        last = prev.sequences[:, -1] if order > 1 else np.full(len(prev.positions), -1)
        positions, sequences, gains = [], [], []
        for w in range(6):
            keep = (last != w) & (distance[:, w] > 1e-12)
            if not np.any(keep):
                continue
            positions.append(_mirror(prev.positions[keep], room.normals[w], room.offsets[w]))
            sequences.append(np.column_stack([prev.sequences[keep], np.full(keep.sum(), w)]))
            gains.append(prev.gains[keep] * reflect[w])
        if not positions:
            break
        levels.append(_ImageLevel(np.concatenate(positions), np.concatenate(sequences), np.concatenate(gains)))
    return levels


def image_sources(room: RoomSpec, source: Sequence[float], max_order: int) -> List[ImageSource]:
    """
    Every mirror sequence up to max_order without consecutive same-wall
    reflections. Sequences that land on the same position (reordered
    reflections across perpendicular walls) are merged into one image.
    """
    source = np.asarray(source, dtype=np.float64)
    if max_order < 0:
        raise GeometryError(f"max_order must be >= 0, got {max_order}")
    if not np.all(room.signed_distances(source) > 0.0):
        raise GeometryError(f"Source {source.tolist()} is not strictly inside the room")
    images = []
    for order, level in enumerate(_enumerate_levels(room, source, max_order)):
        keys = np.round(level.positions, 7)
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        groups: Dict[int, List[int]] = {}
        for idx, group in enumerate(inverse):
            groups.setdefault(int(group), []).append(idx)
        for group in sorted(groups, key=lambda g: first[g]):
            members = groups[group]
            head = members[0]
            images.append(ImageSource(
                position=level.positions[head],
                order=order,
                wall_sequence=tuple(int(w) for w in level.sequences[head]),
                band_gains=level.gains[head],
                alternates=tuple(tuple(int(w) for w in level.sequences[m]) for m in members[1:]),
            ))
    return images


def _prefix_images(room: RoomSpec, source: np.ndarray, sequences: np.ndarray) -> np.ndarray:
    """(M, order + 1, 3) source mirrored through each prefix of its sequence"""
    count, order = sequences.shape
    stack = np.empty((count, order + 1, 3))
    stack[:, 0] = source
    current = np.repeat(source[None, :], count, axis=0)
    for j in range(order):
        walls = sequences[:, j]
        normals = room.normals[walls]
        distance = np.einsum('ij,ij->i', current, normals) - room.offsets[walls]
        current = current - 2.0 * distance[:, None] * normals
        stack[:, j + 1] = current
    return stack


def _visible(room: RoomSpec, source: np.ndarray, sequences: np.ndarray, receiver: np.ndarray,
             tol: float = 1e-9) -> np.ndarray:
    """Back-trace receiver -> image through the walls in reverse order (vectorized)"""
    count, order = sequences.shape
    ok = np.ones(count, dtype=bool)
    if order == 0:
        return ok
    images = _prefix_images(room, source, sequences)
    start = np.repeat(receiver[None, :], count, axis=0)
    for j in range(order, 0, -1):
        walls = sequences[:, j - 1]
        normals = room.normals[walls]
        offsets = room.offsets[walls]
        direction = images[:, j] - start
        denom = np.einsum('ij,ij->i', direction, normals)
        with np.errstate(divide='ignore', invalid='ignore'):
            t = (offsets - np.einsum('ij,ij->i', start, normals)) / denom
        ok &= np.isfinite(t) & (t > tol) & (t < 1.0 - tol)
        hit = start + np.where(np.isfinite(t), t, 0.0)[:, None] * direction
        distance = room.signed_distances(hit)
        distance[np.arange(count), walls] = 0.0
        ok &= np.all(distance >= -tol, axis=1)
        start = hit
    return ok


def visibility_test(image: ImageSource, receiver: Sequence[float], room: RoomSpec,
                    source: Optional[Sequence[float]] = None) -> bool:
    """
    True iff the specular path through the image's walls exists: every
    back-traced intersection lies on its wall polygon. The source defaults to
    the image mirrored back through its wall sequence.
    """
    receiver = np.asarray(receiver, dtype=np.float64)
    if image.order == 0:
        return True
    if source is None:
        source = np.asarray(image.position, dtype=np.float64)[None, :]
        for w in reversed(image.wall_sequence):
            source = _mirror(source, room.normals[w], room.offsets[w])
        source = source[0]
    source = np.asarray(source, dtype=np.float64)
    sequences = np.array((image.wall_sequence,) + tuple(image.alternates), dtype=np.int64)
    return bool(np.any(_visible(room, source, sequences, receiver)))


def _visible_images(room: RoomSpec, source: np.ndarray, receiver: np.ndarray,
                    max_order: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions, band gains and orders of the images visible from the receiver"""
    positions, gains, orders = [], [], []
    for order, level in enumerate(_enumerate_levels(room, source, max_order)):
        visible = _visible(room, source, level.sequences, receiver)
        if not np.any(visible):
            continue
        # merge reorderings of the same reflections
        keys = np.round(level.positions[visible], 7)
        _, first = np.unique(keys, axis=0, return_index=True)
        first = np.sort(first)
        positions.append(level.positions[visible][first])
        gains.append(level.gains[visible][first])
        orders.append(np.full(first.size, order))
    return np.concatenate(positions), np.concatenate(gains), np.concatenate(orders)


# Rendering ---------------------------------------------------------------------------------

def fractional_delay_kernel(delays: np.ndarray, taps: int = FRACTIONAL_DELAY_TAPS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hann-windowed sinc taps for delays in samples. Returns (indices, weights),
    both (M, taps); an integer delay yields a single unit tap.
    """
    delays = np.atleast_1d(np.asarray(delays, dtype=np.float64))
    base = np.floor(delays).astype(np.int64)
    k = np.arange(-taps // 2 + 1, taps // 2 + 1)
    indices = base[:, None] + k[None, :]
    x = indices - delays[:, None]
    window = 0.5 * (1.0 + np.cos(2.0 * np.pi * x / taps))
    window[np.abs(x) > taps / 2] = 0.0
    return indices, np.sinc(x) * window


def _accumulate(out: np.ndarray, delays: np.ndarray, amplitudes: np.ndarray):
    """Add fractional-delay impulses into out (..., L); amplitudes (M, ...)"""
    indices, weights = fractional_delay_kernel(delays)
    length = out.shape[-1]
    valid = (indices >= 0) & (indices < length)
    rows, cols = np.nonzero(valid)
    taps = weights[rows, cols]
    values = amplitudes[rows] * taps.reshape((-1,) + (1,) * (amplitudes.ndim - 1))
    target = np.moveaxis(out, -1, 0)
    np.add.at(target, indices[rows, cols], values)


def decay_envelope(t: np.ndarray, rt: float) -> np.ndarray:
    """Amplitude envelope exp(-6.91 t / RT), -60 dB at t = RT"""
    return np.exp(-T60_DECAY * np.asarray(t, dtype=np.float64) / rt)


def crossfade_ramp(length: int, crossover: int, fade: int) -> np.ndarray:
    """0 before the crossover, raised-cosine rise over fade samples, then 1"""
    ramp = np.zeros(length)
    if crossover >= length:
        return ramp
    rise = np.arange(max(fade, 1)) / max(fade, 1)
    seg = 0.5 * (1.0 - np.cos(np.pi * rise))
    end = min(crossover + fade, length)
    ramp[crossover:end] = seg[:end - crossover]
    ramp[end:] = 1.0
    return ramp


def diffuse_tail(room: RoomSpec, band_rts: Sequence[float], crossover_sample: int, seed: int,
                 reference: np.ndarray, sample_rate: float) -> np.ndarray:
    """
    Decorrelated noise tail (4, L) per band with envelope exp(-6.91 t/RT(b))
    from the crossover, matched per band and channel to the ISM energy in
    the 10 ms before the crossover and faded in over 5 ms.

    reference holds the band-filtered ISM response, (bands, channels, L).
    """
    bands, channels, length = reference.shape
    if not 0 <= crossover_sample < length:
        raise GeometryError(f"Crossover sample {crossover_sample} outside the response length {length}")
    rts = np.asarray(band_rts, dtype=np.float64)
    rng = rng_stream(seed, 'diffuse_tail')
    filters = band_filters(room.bands, sample_rate, complementary=True)
    match = max(int(round(TAIL_MATCH_SECONDS * sample_rate)), 1)
    fade = int(round(TAIL_FADE_SECONDS * sample_rate))
    lo = max(crossover_sample - match, 0)
    ramp = crossfade_ramp(length, crossover_sample, fade)
    t = np.maximum(np.arange(length) - crossover_sample, 0) / sample_rate

    tail = np.zeros((channels, length))
    for b in range(bands):
        noise = apply_band_filter(filters[b], rng.standard_normal((channels, length)))
        if not np.isfinite(rts[b]) or rts[b] <= 0:
            continue
        power = (reference[b, :, lo:crossover_sample] ** 2).mean(axis=-1) if crossover_sample > lo \
            else np.zeros(channels)
        noise_power = (noise ** 2).mean(axis=-1)
        scale = np.where(noise_power > 0, np.sqrt(power / np.where(noise_power > 0, noise_power, 1.0)), 0.0)
        tail += scale[:, None] * noise * decay_envelope(t, rts[b])[None, :]
    return tail * ramp[None, :]


def simulate_srir(room: RoomSpec, source: Sequence[float], array: MicArray, config: SimConfig,
                  seed: Optional[int] = None) -> SRIR:
    """
    Banded image-source rendering at every capsule, recombined through
    complementary octave filters, with an optional diffuse tail from the
    earliest arrival of the highest-order images.
    """
    source = np.asarray(source, dtype=np.float64)
    seed = config.seed if seed is None else seed
    if config.sample_rate <= 0:
        raise GeometryError(f"Sample rate must be positive, got {config.sample_rate}")
    if room.absorption is None:
        raise GeometryError("Room has no absorption assigned")
    if tuple(room.bands) != tuple(config.bands):
        raise GeometryError(f"Room bands {room.bands} differ from simulation bands {config.bands}")
    if not room.contains(source, 1e-9):
        raise GeometryError(f"Source {source.tolist()} is outside the room")
    for p in array.positions:
        if not room.contains(p, 1e-9):
            raise GeometryError(f"Capsule at {p.tolist()} is outside the room")

    fs = float(config.sample_rate)
    c = config.speed_of_sound
    length = config.length
    positions, gains, orders = _visible_images(room, source, array.center, config.max_order)
    logger.debug(f"simulate_srir: {len(positions)} visible images up to order {config.max_order}")

    banded = np.zeros((len(config.bands), 4, length))
    for i, (capsule, look) in enumerate(zip(array.positions, array.look_directions)):
        vectors = positions - capsule
        distance = np.linalg.norm(vectors, axis=1)
        incident = vectors / distance[:, None]
        amplitude = gains * (_cardioid(look, incident) / distance)[:, None]  # (M, bands)
        _accumulate(banded[:, i, :], distance / c * fs, amplitude)

    filters = band_filters(config.bands, fs, complementary=True)
    for b, sos in enumerate(filters):
        banded[b] = apply_band_filter(sos, banded[b])
    samples = banded.sum(axis=0)

    tail_info = {'tail': False}
    if config.tail and config.max_order > 0:
        horizon = np.linalg.norm(positions[orders == config.max_order] - array.center, axis=1) \
            if np.any(orders == config.max_order) else np.array([])
        if horizon.size:
            crossover = int(round(horizon.min() / c * fs))
            if crossover < length:
                ramp = crossfade_ramp(length, crossover, int(round(TAIL_FADE_SECONDS * fs)))
                tail = diffuse_tail(room, sabine_rt(room), crossover, seed, banded, fs)
                samples = samples * (1.0 - ramp)[None, :] + tail
                tail_info = {'tail': True, 'crossover_sample': crossover}

    return SRIR(
        samples=samples.astype(np.float32),
        sample_rate=int(config.sample_rate),
        source=source,
        receiver=np.asarray(array.center, dtype=np.float64),
        aligned=False,
        toa_seconds=0.0,
        metadata={
            'generator_version': GENERATOR_VERSION,
            'max_order': int(config.max_order),
            'seed': int(seed),
            **tail_info,
        },
    )


def write_srir(path, srir: SRIR, extra: Optional[Dict] = None) -> Path:
    """4-channel float WAV plus JSON sidecar"""
    path = write_wav(path, srir.samples, srir.sample_rate)
    sidecar = srir.sidecar()
    if extra:
        sidecar.update(extra)
    write_json(sidecar_path(path), sidecar)
    return path


def read_srir(path) -> SRIR:
    samples, fs = read_wav(path)
    meta = read_json(sidecar_path(path))
    return SRIR(
        samples=samples.astype(np.float32),
        sample_rate=fs,
        source=np.asarray(meta.get('source', [np.nan] * 3), dtype=np.float64),
        receiver=np.asarray(meta.get('receiver', [np.nan] * 3), dtype=np.float64),
        aligned=bool(meta.get('aligned', False)),
        toa_seconds=float(meta.get('toa_seconds', 0.0)),
        metadata={k: v for k, v in meta.items()
                  if k not in ('source', 'receiver', 'aligned', 'toa_seconds', 'sample_rate')},
    )
