"""
Acoustics Analysis Module

Room-acoustic parameters from SRIRs:
1. Octave-band reverberation time (Schroeder integration, T20/T30 fits)
2. Broadband direct-to-reverberant ratio
3. Time and direction of arrival of the direct sound
4. Just-noticeable-difference scoring and aggregate error reports
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter1d
from scipy.signal import butter, sosfiltfilt
from scipy.stats import pearsonr

from audio_io import write_csv
from errors import AnalysisError

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
OCTAVE_CENTERS = (125, 250, 500, 1000, 2000, 4000)
FILTER_ORDER = 3  # per skirt; band-pass designs are 6th order
EDC_FLOOR_DB = -120.0
DIRECT_WINDOW_SECONDS = 1.25e-3
DRR_CLAMP_DB = 80.0
ONSET_THRESHOLD = 0.1  # 20 dB below the global peak
DOA_UPSAMPLE = 8

RT_METHODS = {
    'T20': (-5.0, -25.0),
    'T30': (-5.0, -35.0),
}

REPORT_COLUMNS = (
    ['room_id', 'position_id']
    + [f'rt_{c}' for c in OCTAVE_CENTERS]
    + ['mid_rt', 'drr_db', 'doa_x', 'doa_y', 'doa_z', 'toa_s']
)

AGGREGATE_COLUMNS = [
    'label', 'count',
    'rt_rmse', 'rt_rho', 'rt_bias', 'rt_pct_jnd',
    'drr_rmse', 'drr_rho', 'drr_bias', 'drr_pct_jnd',
    'doa_error_deg',
]

# Piecewise-linear DRR JND (truth dB -> threshold dB), constant beyond the ends
DRR_JND_KNOTS = ((-10.0, 6.0), (0.0, 2.4), (10.0, 6.0))


@dataclass
class EnergyDecayCurve:
    values: np.ndarray  # dB, 0 at t=0, non-increasing
    sample_rate: float

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.size) / self.sample_rate

    @property
    def floor_db(self) -> float:
        return float(self.values.min())


# Filterbank ------------------------------------------------------------------

def band_filters(centers: Sequence[float], fs: float, complementary: bool = False) -> List[np.ndarray]:
    """
    Butterworth second-order sections per octave band (edges c/sqrt2 .. c*sqrt2).

    With complementary=True the lowest band is a low-pass and the highest a
    high-pass, so zero-phase bands sum to an approximately flat response.
    A band whose upper edge passes Nyquist is designed as a high-pass.
    """
    nyquist = fs / 2.0
    sos_list = []
    for i, center in enumerate(centers):
        if center <= 0 or center >= nyquist:
            raise AnalysisError(f"Band center {center} Hz is outside (0, {nyquist}) Hz at fs={fs}")
        low, high = center / np.sqrt(2.0), center * np.sqrt(2.0)
        lowest = complementary and i == 0
        highest = (complementary and i == len(centers) - 1) or high >= nyquist
        if lowest and highest:
            sos_list.append(None)
        elif lowest:
            sos_list.append(butter(FILTER_ORDER, high, btype='lowpass', fs=fs, output='sos'))
        elif highest:
            sos_list.append(butter(FILTER_ORDER, low, btype='highpass', fs=fs, output='sos'))
        else:
            sos_list.append(butter(FILTER_ORDER, [low, high], btype='bandpass', fs=fs, output='sos'))
    return sos_list


def apply_band_filter(sos, signal: np.ndarray) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    if sos is None:
        return signal.copy()
    padlen = min(3 * (2 * len(sos) + 1), signal.shape[-1] - 1)
    return sosfiltfilt(sos, signal, axis=-1, padlen=max(padlen, 0))


def octave_filterbank(signal: np.ndarray, centers: Sequence[float], fs: float,
                      complementary: bool = False) -> np.ndarray:
    """Zero-phase octave bands of a signal; returns (bands,) + signal.shape"""
    sos_list = band_filters(centers, fs, complementary)
    signal = np.asarray(signal, dtype=np.float64)
    return np.stack([apply_band_filter(sos, signal) for sos in sos_list])


# Decay analysis ----------------------------------------------------------------

def schroeder_edc(channel: np.ndarray, sample_rate: float = 1.0) -> EnergyDecayCurve:
    """Backward-integrated energy in dB relative to the total, floored at -120 dB"""
    channel = np.asarray(channel, dtype=np.float64)
    if channel.size == 0:
        raise AnalysisError("Cannot integrate an empty response")
    energy = channel ** 2
    remaining = np.cumsum(energy[::-1])[::-1]
    total = remaining[0]
    if total <= 0.0:
        raise AnalysisError("Cannot integrate an all-zero response")
    with np.errstate(divide='ignore'):
        values = 10.0 * np.log10(remaining / total)
    values = np.maximum(values, EDC_FLOOR_DB)
    values[0] = 0.0
    return EnergyDecayCurve(values=values, sample_rate=float(sample_rate))


def _fit_rt(edc: EnergyDecayCurve, method: str) -> float:
    upper, lower = RT_METHODS[method]
    values = edc.values
    if edc.floor_db > lower:
        raise AnalysisError(
            f"{method} needs the decay to reach {lower} dB, EDC only reaches {edc.floor_db:.1f} dB")
    start = int(np.argmax(values <= upper))
    stop = int(np.argmax(values < lower))
    if stop - start < 3:
        raise AnalysisError(
            f"{method}: no usable decay range between {upper} and {lower} dB "
            f"(EDC floor {edc.floor_db:.1f} dB)")
    t = edc.times[start:stop]
    design = np.column_stack([t, np.ones_like(t)])
    (slope, _), *_ = np.linalg.lstsq(design, values[start:stop], rcond=None)
    if slope >= 0:
        raise AnalysisError(f"{method}: decay slope is not negative ({slope:.3g} dB/s)")
    return float(-60.0 / slope)


def rt_from_edc(edc: EnergyDecayCurve, method: str = 'T30', fallback: bool = True) -> float:
    """
    Reverberation time from a least-squares line on the EDC: [-5, -25] dB for
    T20, [-5, -35] dB for T30, extrapolated to 60 dB. T30 falls back to T20
    when the decay range is insufficient.
    """
    if method not in RT_METHODS:
        raise AnalysisError(f"Unknown RT method '{method}', choose from {sorted(RT_METHODS)}")
    try:
        return _fit_rt(edc, method)
    except AnalysisError as e:
        if method == 'T30' and fallback:
            logger.warning(f"T30 unavailable, falling back to T20: {e}")
            return _fit_rt(edc, 'T20')
        raise


def truncate_noise_floor(channel: np.ndarray, sample_rate: float, smoothing: float = 0.01) -> np.ndarray:
    """
    Cut the response where its smoothed energy envelope reaches the noise
    floor, estimated as the mean energy of the final 10% of the response.
    """
    channel = np.asarray(channel, dtype=np.float64)
    n = channel.size
    tail = channel[int(0.9 * n):]
    if tail.size == 0:
        return channel
    floor = float(np.mean(tail ** 2))
    width = max(int(round(smoothing * sample_rate)), 1)
    envelope = uniform_filter1d(channel ** 2, size=width, mode='constant')
    peak = int(np.argmax(envelope))
    below = np.nonzero(envelope[peak:] <= 2.0 * floor)[0]
    if below.size == 0:
        return channel
    return channel[:max(peak + int(below[0]), 1)]


def band_rt(channel: np.ndarray, sample_rate: float, method: str = 'T30') -> float:
    return rt_from_edc(schroeder_edc(truncate_noise_floor(channel, sample_rate), sample_rate), method)


def rt_per_band(samples: np.ndarray, sample_rate: float, centers: Sequence[float] = OCTAVE_CENTERS,
                method: str = 'T30') -> Dict[int, float]:
    """Per-band RT averaged over channels; NaN for bands that cannot be estimated"""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    usable = [c for c in centers if c * np.sqrt(2.0) < sample_rate / 2.0]
    banded = octave_filterbank(samples, usable, sample_rate)
    result = {int(c): float('nan') for c in centers}
    for b, center in enumerate(usable):
        estimates = []
        for channel in banded[b]:
            try:
                estimates.append(band_rt(channel, sample_rate, method))
            except AnalysisError as e:
                logger.warning(f"RT at {center} Hz failed on one channel: {e}")
        if estimates:
            result[int(center)] = float(np.mean(estimates))
    return result


def mid_rt(rt_bands: Dict[int, float]) -> float:
    """Mean of the 500 Hz and 1 kHz band values"""
    missing = [c for c in (500, 1000) if c not in rt_bands]
    if missing:
        raise AnalysisError(f"Mid-frequency RT needs the 500 Hz and 1 kHz bands, missing {missing}")
    return 0.5 * (float(rt_bands[500]) + float(rt_bands[1000]))


# Direct sound ----------------------------------------------------------------------

def _omni(samples: np.ndarray) -> np.ndarray:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return samples.mean(axis=0)


def _direct_peak(samples: np.ndarray) -> int:
    """First sample 20 dB below the global peak, advanced to the next local peak"""
    magnitude = np.abs(_omni(samples))
    peak = magnitude.max()
    if peak <= 0.0:
        raise AnalysisError("Response is silent")
    onset = int(np.argmax(magnitude > ONSET_THRESHOLD * peak))
    while onset + 1 < magnitude.size and magnitude[onset + 1] > magnitude[onset]:
        onset += 1
    return onset


def _direct_window(peak: int, length: int, sample_rate: float):
    half = int(round(0.5 * DIRECT_WINDOW_SECONDS * sample_rate))
    return max(peak - half, 0), min(peak + half + 1, length)


def broadband_drr(samples: np.ndarray, sample_rate: float) -> float:
    """Energy in 1.25 ms centered on the first peak over the rest, all channels summed"""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    peak = _direct_peak(samples)
    lo, hi = _direct_window(peak, samples.shape[-1], sample_rate)
    energy = samples ** 2
    direct = float(energy[:, lo:hi].sum())
    rest = float(energy.sum()) - direct
    if rest <= direct * 10.0 ** (-DRR_CLAMP_DB / 10.0):
        return DRR_CLAMP_DB
    return float(min(10.0 * np.log10(direct / rest), DRR_CLAMP_DB))


def toa_estimate(samples: np.ndarray, sample_rate: float) -> float:
    """Time of the first peak on the omni-equivalent channel"""
    return _direct_peak(samples) / float(sample_rate)


def _interpolated_lag(a: np.ndarray, b: np.ndarray, max_lag: float) -> float:
    """Lag (in samples) maximizing the cross-correlation of a against b"""
    n = a.size + b.size
    nfft = 1 << int(np.ceil(np.log2(n)))
    spectrum = np.fft.rfft(a, nfft) * np.conj(np.fft.rfft(b, nfft))
    upsampled = nfft * DOA_UPSAMPLE
    corr = np.fft.irfft(spectrum, upsampled)
    corr = np.concatenate([corr[-upsampled // 2:], corr[:upsampled // 2]])
    center = upsampled // 2
    reach = int(np.ceil(max_lag * DOA_UPSAMPLE)) + 2
    lo, hi = max(center - reach, 1), min(center + reach + 1, corr.size - 1)
    k = lo + int(np.argmax(corr[lo:hi]))
    y0, y1, y2 = corr[k - 1], corr[k], corr[k + 1]
    denom = y0 - 2.0 * y1 + y2
    delta = 0.5 * (y0 - y2) / denom if denom != 0.0 else 0.0
    return (k - center + float(np.clip(delta, -0.5, 0.5))) / DOA_UPSAMPLE


def doa_direct(samples: np.ndarray, array, sample_rate: float,
               speed_of_sound: float = SPEED_OF_SOUND) -> np.ndarray:
    """
    Direction of the direct sound (unit vector from receiver toward source)
    from pairwise TDOAs of the isolated direct segment, by far-field least
    squares on (m_i - m_j) . u = -c tau_ij.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    offsets = np.asarray(array.capsule_offsets, dtype=np.float64)
    if samples.shape[0] != offsets.shape[0]:
        raise AnalysisError(
            f"Response has {samples.shape[0]} channels but the array has {offsets.shape[0]} capsules")
    peak = _direct_peak(samples)
    lo, hi = _direct_window(peak, samples.shape[-1], sample_rate)
    segment = samples[:, lo:hi]
    energy = (segment ** 2).sum(axis=1)
    live = energy > 1e-12 * energy.max()

    rows, rhs = [], []
    count = offsets.shape[0]
    for i in range(count):
        for j in range(i + 1, count):
            if not (live[i] and live[j]):
                continue
            baseline = offsets[i] - offsets[j]
            max_lag = np.linalg.norm(baseline) / speed_of_sound * sample_rate
            tau = _interpolated_lag(segment[i], segment[j], max_lag) / sample_rate
            rows.append(baseline)
            rhs.append(-speed_of_sound * tau)
    if not rows:
        raise AnalysisError("No capsule pair carries a direct sound")
    design = np.asarray(rows)
    rank = np.linalg.matrix_rank(design)
    u, *_ = np.linalg.lstsq(design, np.asarray(rhs), rcond=None)
    if rank < 3:
        # A dead capsule faces away from the source: complete u along the
        # missing axis on the side opposite to its look direction.
        dead = np.nonzero(~live)[0]
        if rank < 2 or dead.size == 0:
            raise AnalysisError(f"Rank-deficient TDOA system (rank {rank}); degenerate array geometry")
        _, _, vt = np.linalg.svd(design)
        axis = vt[-1]
        u = u - axis * (u @ axis)
        along = np.sqrt(max(1.0 - float(u @ u), 0.0))
        look = np.asarray(array.look_directions)[dead[0]]
        u = u + axis * (along if axis @ look < 0 else -along)
    norm = np.linalg.norm(u)
    if norm == 0.0 or not np.isfinite(norm):
        raise AnalysisError("TDOA least squares produced a zero direction")
    return u / norm


def geometric_doa(source: Sequence[float], receiver: Sequence[float]) -> np.ndarray:
    """Unit vector from the receiver toward the source"""
    d = np.asarray(source, dtype=np.float64) - np.asarray(receiver, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0.0:
        raise AnalysisError("Source and receiver coincide")
    return d / norm


def great_circle_error(u1: Sequence[float], u2: Sequence[float]) -> float:
    """Angle between two directions in degrees"""
    a = np.asarray(u1, dtype=np.float64)
    b = np.asarray(u2, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(np.degrees(np.arccos(np.clip(a @ b, -1.0, 1.0))))


# Perceptual tolerances --------------------------------------------------------------

def jnd_rt(predicted: float, truth: float) -> bool:
    """Within 10% of the true RT"""
    return bool(abs(predicted - truth) <= 0.10 * truth + 1e-12)


def drr_jnd_threshold(truth_db: float) -> float:
    knots_x, knots_y = zip(*DRR_JND_KNOTS)
    return float(np.interp(truth_db, knots_x, knots_y))


def jnd_drr(predicted_db: float, truth_db: float) -> bool:
    return bool(abs(predicted_db - truth_db) <= drr_jnd_threshold(truth_db) + 1e-12)


# Reports ---------------------------------------------------------------------------

def analyze_srir(samples: np.ndarray, sample_rate: float, array, room_id: str = '', position_id: int = 0,
                 method: str = 'T30') -> Dict[str, float]:
    """One report row: per-band RT, mid RT, DRR, DoA and ToA of a response"""
    bands = rt_per_band(samples, sample_rate, OCTAVE_CENTERS, method)
    row = {'room_id': room_id, 'position_id': int(position_id)}
    for center, value in bands.items():
        row[f'rt_{center}'] = value
    row['mid_rt'] = mid_rt(bands)
    row['drr_db'] = broadband_drr(samples, sample_rate)
    try:
        doa = doa_direct(samples, array, sample_rate)
    except AnalysisError as e:
        logger.warning(f"DoA failed for {room_id}/{position_id}: {e}")
        doa = np.full(3, np.nan)
    row['doa_x'], row['doa_y'], row['doa_z'] = (float(v) for v in doa)
    row['toa_s'] = toa_estimate(samples, sample_rate)
    return row


def report_frame(rows: Iterable[Dict[str, float]]) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows))
    for column in REPORT_COLUMNS:
        if column not in frame:
            frame[column] = np.nan
    return frame[REPORT_COLUMNS]


def write_report(path, rows: Iterable[Dict[str, float]]) -> Path:
    return write_csv(path, report_frame(rows))


def _pearson(pred: np.ndarray, truth: np.ndarray) -> float:
    if pred.size < 2 or np.std(truth) == 0.0 or np.std(pred) == 0.0:
        return float('nan')
    return float(pearsonr(pred, truth)[0])


def _scores(pred: np.ndarray, truth: np.ndarray, jnd) -> Dict[str, float]:
    keep = np.isfinite(pred) & np.isfinite(truth)
    pred, truth = pred[keep], truth[keep]
    if pred.size == 0:
        return {'rmse': float('nan'), 'rho': float('nan'), 'bias': float('nan'), 'pct_jnd': float('nan')}
    diff = pred - truth
    return {
        'rmse': float(np.sqrt(np.mean(diff ** 2))),
        'rho': _pearson(pred, truth),
        'bias': float(np.mean(diff)),
        'pct_jnd': 100.0 * float(np.mean([jnd(p, t) for p, t in zip(pred, truth)])),
    }


def pair_rows(predicted: pd.DataFrame, truth: pd.DataFrame) -> pd.DataFrame:
    """Join prediction and truth rows on (room_id, position_id)"""
    keys = ['room_id', 'position_id']
    predicted = predicted.astype({'room_id': str})
    truth = truth.astype({'room_id': str})
    return predicted.merge(truth, on=keys, suffixes=('_pred', '_true'), validate='one_to_one')


def metrics_report(predicted: pd.DataFrame, truth: pd.DataFrame, label: str = '',
                   doa_truth: Optional[np.ndarray] = None) -> pd.DataFrame:
    """
    Aggregate RMSE, Pearson rho, bias and % within JND for mid RT and DRR,
    plus the mean great-circle DoA error. doa_truth (rows aligned with the
    joined pairs) overrides the truth responses' estimated directions.
    """
    pairs = pair_rows(predicted, truth)
    if len(pairs) < 2:
        raise AnalysisError(f"Aggregate metrics need at least 2 paired responses, got {len(pairs)}")
    rt = _scores(pairs['mid_rt_pred'].to_numpy(float), pairs['mid_rt_true'].to_numpy(float), jnd_rt)
    drr = _scores(pairs['drr_db_pred'].to_numpy(float), pairs['drr_db_true'].to_numpy(float), jnd_drr)

    pred_doa = pairs[['doa_x_pred', 'doa_y_pred', 'doa_z_pred']].to_numpy(float)
    if doa_truth is None:
        true_doa = pairs[['doa_x_true', 'doa_y_true', 'doa_z_true']].to_numpy(float)
    else:
        true_doa = np.asarray(doa_truth, dtype=np.float64)
    errors = [great_circle_error(p, t) for p, t in zip(pred_doa, true_doa)
              if np.all(np.isfinite(p)) and np.all(np.isfinite(t))]
    doa_error = float(np.mean(errors)) if errors else float('nan')

    row = {'label': label, 'count': len(pairs)}
    row.update({f'rt_{k}': v for k, v in rt.items()})
    row.update({f'drr_{k}': v for k, v in drr.items()})
    row['doa_error_deg'] = doa_error
    return pd.DataFrame([row], columns=AGGREGATE_COLUMNS)


def write_plot_data(out_dir, predicted: pd.DataFrame, truth: pd.DataFrame) -> List[Path]:
    """Plain numeric column files: RT scatter, DRR against position, DoA arrows"""
    out_dir = Path(out_dir)
    pairs = pair_rows(predicted, truth).sort_values(['room_id', 'position_id'])
    tables = {
        'rt_scatter.txt': pairs[['mid_rt_true', 'mid_rt_pred']],
        'drr_position.txt': pairs[['position_id', 'drr_db_true', 'drr_db_pred']],
        'doa_arrows.txt': pairs[['position_id', 'doa_x_true', 'doa_y_true', 'doa_z_true',
                                 'doa_x_pred', 'doa_y_pred', 'doa_z_pred']],
    }
    written = []
    for name, table in tables.items():
        written.append(write_csv(out_dir / name, table.reset_index(drop=True)))
    logger.info(f"Plot data written to {out_dir}")
    return written
