"""
SRIR Diffusion Module

Conditional diffusion generator for 4-channel SRIRs:
1. Variance-exploding preconditioning and lambda-weighted denoising loss
2. rho-warped noise schedule and stochastic churn sampler (Euler + Heun)
3. Random Fourier noise features and conditioning MLPs
4. 1-D U-Net with FiLM residual blocks: encoder/bottleneck FiLM driven by
   [noise, h], decoder FiLM by [noise, v] (or everything concatenated)
5. Generator training against a frozen room encoder
"""

import sys
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from acoustics_analysis import toa_estimate
from audio_io import write_csv
from config import rng_stream
from errors import AnalysisError, CheckpointError, ConfigurationError, ShapeError, TrainingError
from room_sim import SRIR
from tensor_core import (
    EVAL, TRAIN, LayerSpec, LRSchedule, Module, OptimizerState,
    adam_step, build_layer, file_digest, load_checkpoint, lr_decay, merge_grads, mlp, save_checkpoint,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'srir-generator'
COND_HIDDEN = (128, 256)
COND_OUT = 512
POSITION_SCALE = (20.0, 20.0, 8.0)


class Variant(str, Enum):
    PROPOSED = 'proposed'
    CONCAT_ALL_EMB = 'concat-all'
    WITH_TOA = 'with-toa'


@dataclass(frozen=True)
class DiffusionConfig:
    depth: int = 6
    base_channels: int = 64
    channel_mult: Tuple[int, ...] = (1, 1, 2, 2, 4, 4)
    rff_dim: int = 256
    h_dim: int = 128
    sample_rate: int = 48000
    duration: float = 0.5
    epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 3e-4
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 10
    sigma_min: float = 1e-6
    sigma_max: float = 10.0
    rho: float = 10.0
    steps: int = 35
    s_churn: float = 1.0
    s_tmin: float = 0.0
    s_tmax: float = float('inf')
    s_noise: float = 1.0
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5
    variant: str = Variant.PROPOSED.value
    dilations: Tuple[int, ...] = (1, 2, 4)
    kernel_size: int = 3
    channels: int = 4
    learned_preconditioning: bool = False
    rff_scale: float = 16.0

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ConfigurationError(f"Need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.steps < 2:
            raise ConfigurationError(f"steps must be >= 2, got {self.steps}")
        if self.sigma_data <= 0:
            raise ConfigurationError(f"sigma_data must be > 0, got {self.sigma_data}")
        if len(self.channel_mult) != self.depth:
            raise ConfigurationError(
                f"channel_mult has {len(self.channel_mult)} entries for a depth-{self.depth} U-Net")
        Variant(self.variant)
        object.__setattr__(self, 'channel_mult', tuple(self.channel_mult))
        object.__setattr__(self, 'dilations', tuple(self.dilations))

    @property
    def length(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def padded_length(self) -> int:
        block = 2 ** self.depth
        return -(-self.length // block) * block

    @property
    def schedule(self) -> LRSchedule:
        return LRSchedule(self.learning_rate, self.lr_decay_factor, self.lr_decay_every)

    @property
    def variant_enum(self) -> Variant:
        return Variant(self.variant)


@dataclass
class NoiseSchedule:
    taus: np.ndarray  # strictly decreasing, sigma_max .. sigma_min

    @property
    def with_terminal(self) -> np.ndarray:
        return np.append(self.taus, 0.0)


# EDM math -----------------------------------------------------------------------------

def precondition_coeffs(sigma, sigma_data: float):
    """(c_skip, c_out, c_in, lambda) with lambda = 1 / c_out^2"""
    sigma = np.asarray(sigma, dtype=np.float64)
    total = sigma ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / total
    c_out = sigma * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    with np.errstate(divide='ignore'):
        lam = total / (sigma * sigma_data) ** 2
    return c_skip, c_out, c_in, lam


def noise_schedule(config: DiffusionConfig) -> NoiseSchedule:
    i = np.arange(config.steps)
    inv_rho = 1.0 / config.rho
    hi, lo = config.sigma_max ** inv_rho, config.sigma_min ** inv_rho
    taus = (hi + i / (config.steps - 1) * (lo - hi)) ** config.rho
    taus[0], taus[-1] = config.sigma_max, config.sigma_min
    return NoiseSchedule(taus=taus)


def sigma_draw(rng: np.random.Generator, config: DiffusionConfig, size=None):
    """ln sigma ~ Normal(p_mean, p_std), clamped to [sigma_min, sigma_max]"""
    sigma = np.exp(rng.normal(config.p_mean, config.p_std, size=size))
    return np.clip(sigma, config.sigma_min, config.sigma_max)


def rff_embed(u: np.ndarray, frequencies: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """cos(2 pi w u + b) for u = ln(sigma) / 4, shape (N, rff_dim)"""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    return np.cos(2.0 * np.pi * u[:, None] * frequencies[None, :] + phases[None, :])


def conditioning_vector(source: Sequence[float], receiver: Sequence[float],
                        scale: Sequence[float] = POSITION_SCALE) -> np.ndarray:
    """v = (s - r) scaled per axis by the largest training room dimensions"""
    return (np.asarray(source, dtype=np.float64) - np.asarray(receiver, dtype=np.float64)) / np.asarray(scale)


def estimate_sigma_data(responses: np.ndarray) -> float:
    sigma = float(np.std(np.asarray(responses, dtype=np.float64)))
    if sigma <= 0.0:
        raise TrainingError("Training responses are all zero, sigma_data is undefined")
    return sigma


# Network ------------------------------------------------------------------------------

class FiLMResBlock(Module):
    """FiLM from the conditioning vector, optional 1x1 projection, then y += conv_d(gelu(y)) per dilation"""

    def __init__(self, in_channels: int, out_channels: int, cond_dim: int, dilations: Sequence[int],
                 kernel_size: int, rng, dtype=np.float32, name: str = None):
        super().__init__(name)
        self.in_channels = in_channels
        self.film_proj = self.add_child('film_proj', build_layer(
            LayerSpec('linear', in_channels=cond_dim, out_channels=2 * in_channels), rng, dtype, zero_init=True))
        self.film = build_layer(LayerSpec('film'))
        self.proj = None
        if in_channels != out_channels:
            self.proj = self.add_child('proj', build_layer(
                LayerSpec('conv1d-dilated', in_channels=in_channels, out_channels=out_channels), rng, dtype))
        self.acts = []
        self.convs = []
        for i, d in enumerate(dilations):
            self.acts.append(build_layer(LayerSpec('gelu')))
            self.convs.append(self.add_child(f'conv{i}', build_layer(
                LayerSpec('conv1d-dilated', in_channels=out_channels, out_channels=out_channels,
                          kernel_size=kernel_size, dilation=d), rng, dtype)))

    def forward(self, x, cond, mode=TRAIN):
        mod, lin_cache = self.film_proj.forward(cond, mode)
        c = self.in_channels
        y, film_cache = self.film.forward(x, mode, gamma_hat=mod[:, :c], beta=mod[:, c:])
        proj_cache = None
        if self.proj is not None:
            y, proj_cache = self.proj.forward(y, mode)
        stack = []
        for act, conv in zip(self.acts, self.convs):
            a, act_cache = act.forward(y, mode)
            r, conv_cache = conv.forward(a, mode)
            y = y + r
            stack.append((act_cache, conv_cache))
        return y, {'owner': self, 'lin': lin_cache, 'film': film_cache, 'proj': proj_cache, 'stack': stack}

    def backward(self, cache, upstream):
        """Returns (input grad, parameter grads, conditioning grad)"""
        cache = self._require_cache(cache)
        grads = {}
        dy = upstream
        for i in reversed(range(len(self.convs))):
            act_cache, conv_cache = cache['stack'][i]
            da, g_conv = self.convs[i].backward(conv_cache, dy)
            dr, _ = self.acts[i].backward(act_cache, da)
            dy = dy + dr
            merge_grads(grads, f'conv{i}', g_conv)
        if self.proj is not None:
            dy, g_proj = self.proj.backward(cache['proj'], dy)
            merge_grads(grads, 'proj', g_proj)
        dx, g_film = self.film.backward(cache['film'], dy)
        dmod = np.concatenate([g_film['gamma_hat'], g_film['beta']], axis=1)
        dcond, g_lin = self.film_proj.backward(cache['lin'], dmod)
        merge_grads(grads, 'film_proj', g_lin)
        return dx, grads, dcond


class UNet1d(Module):
    """Encoder levels (FiLM block, stride-2 conv), bottleneck block, decoder levels (x2 upsample, conv, skip concat, FiLM block)"""

    def __init__(self, config: DiffusionConfig, enc_dim: int, dec_dim: int, rng, dtype=np.float32):
        super().__init__('unet')
        self.depth = config.depth
        conv = lambda cin, cout, k=3, stride=1, zero=False: build_layer(
            LayerSpec('conv1d-dilated', in_channels=cin, out_channels=cout, kernel_size=k, stride=stride),
            rng, dtype, zero_init=zero)
        widths = [config.base_channels * m for m in config.channel_mult]
        block = lambda cin, cout, dim: FiLMResBlock(cin, cout, dim, config.dilations, config.kernel_size, rng, dtype)

        self.in_conv = self.add_child('in_conv', conv(config.channels, widths[0]))
        self.down_blocks, self.downsamplers = [], []
        channels = widths[0]
        for level, width in enumerate(widths):
            self.down_blocks.append(self.add_child(f'down{level}', block(channels, width, enc_dim)))
            self.downsamplers.append(self.add_child(f'downsample{level}', conv(width, width, stride=2)))
            channels = width
        self.mid = self.add_child('mid', block(channels, channels, enc_dim))
        self.upsamplers, self.up_convs, self.up_blocks = [], [], []
        for level in reversed(range(self.depth)):
            self.upsamplers.append(build_layer(LayerSpec('upsample-nearest')))
            self.up_convs.append(self.add_child(f'upconv{level}', conv(channels, channels)))
            self.up_blocks.append(self.add_child(f'up{level}', block(channels + widths[level], widths[level], dec_dim)))
            channels = widths[level]
        self.out_conv = self.add_child('out_conv', conv(channels, config.channels, zero=True))

    def forward(self, x, enc_cond, dec_cond, mode=TRAIN):
        if x.shape[-1] % (2 ** self.depth):
            raise ShapeError(
                f"U-Net input length {x.shape[-1]} is not divisible by 2^{self.depth}; pad the time axis first")
        film_inputs = OrderedDict()
        caches = {}
        y, caches['in_conv'] = self.in_conv.forward(x, mode)
        skips = []
        for level in range(self.depth):
            film_inputs[f'down{level}'] = enc_cond
            y, caches[f'down{level}'] = self.down_blocks[level].forward(y, enc_cond, mode)
            skips.append(y)
            y, caches[f'downsample{level}'] = self.downsamplers[level].forward(y, mode)
        film_inputs['mid'] = enc_cond
        y, caches['mid'] = self.mid.forward(y, enc_cond, mode)
        for i, level in enumerate(reversed(range(self.depth))):
            y, caches[f'upsample{level}'] = self.upsamplers[i].forward(y, mode)
            y, caches[f'upconv{level}'] = self.up_convs[i].forward(y, mode)
            caches[f'split{level}'] = y.shape[1]
            y = np.concatenate([y, skips[level]], axis=1)
            film_inputs[f'up{level}'] = dec_cond
            y, caches[f'up{level}'] = self.up_blocks[i].forward(y, dec_cond, mode)
        y, caches['out_conv'] = self.out_conv.forward(y, mode)
        return y, {'owner': self, 'caches': caches, 'film_inputs': film_inputs}

    def backward(self, cache, upstream):
        """Returns (input grad, parameter grads, encoder-conditioning grad, decoder-conditioning grad)"""
        cache = self._require_cache(cache)
        caches = cache['caches']
        grads = {}
        d_enc = 0.0
        d_dec = 0.0
        dy, g = self.out_conv.backward(caches['out_conv'], upstream)
        merge_grads(grads, 'out_conv', g)
        skip_grads = {}
        for i, level in enumerate(reversed(range(self.depth))):
            dy, g, dc = self.up_blocks[i].backward(caches[f'up{level}'], dy)
            merge_grads(grads, f'up{level}', g)
            d_dec = d_dec + dc
            split = caches[f'split{level}']
            skip_grads[level] = dy[:, split:]
            dy, g = self.up_convs[i].backward(caches[f'upconv{level}'], dy[:, :split])
            merge_grads(grads, f'upconv{level}', g)
            dy, _ = self.upsamplers[i].backward(caches[f'upsample{level}'], dy)
        dy, g, dc = self.mid.backward(caches['mid'], dy)
        merge_grads(grads, 'mid', g)
        d_enc = d_enc + dc
        for level in reversed(range(self.depth)):
            dy, g = self.downsamplers[level].backward(caches[f'downsample{level}'], dy)
            merge_grads(grads, f'downsample{level}', g)
            dy = dy + skip_grads[level]
            dy, g, dc = self.down_blocks[level].backward(caches[f'down{level}'], dy)
            merge_grads(grads, f'down{level}', g)
            d_enc = d_enc + dc
        dx, g = self.in_conv.backward(caches['in_conv'], dy)
        merge_grads(grads, 'in_conv', g)
        return dx, grads, d_enc, d_dec


class GeneratorModel(Module):
    """Noise features, conditioning MLPs and the U-Net F_theta"""

    def __init__(self, config: DiffusionConfig, rng: np.random.Generator = None, dtype=np.float32):
        super().__init__('generator')
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.variant = config.variant_enum
        self.buffers['rff_freq'] = (rng.standard_normal(config.rff_dim) * config.rff_scale).astype(dtype)
        self.buffers['rff_phase'] = rng.uniform(0.0, 2.0 * np.pi, config.rff_dim).astype(dtype)
        sizes = list(COND_HIDDEN) + [COND_OUT]
        self.noise_mlp = self.add_child('noise_mlp', mlp([config.rff_dim] + sizes, rng, dtype))
        self.h_mlp = self.add_child('h_mlp', mlp([config.h_dim] + sizes, rng, dtype))
        self.v_mlp = self.add_child('v_mlp', mlp([3] + sizes, rng, dtype))
        if self.variant == Variant.CONCAT_ALL_EMB:
            enc_dim = dec_dim = 3 * COND_OUT
        else:
            enc_dim = dec_dim = 2 * COND_OUT
        self.unet = self.add_child('unet', UNet1d(config, enc_dim, dec_dim, rng, dtype))
        if config.learned_preconditioning:
            # log multipliers of c_skip, c_out, c_in
            self.params['log_scales'] = np.zeros(3, dtype=np.float64)

    @property
    def dtype(self):
        return self.unet.dtype

    def precondition_scales(self) -> np.ndarray:
        if 'log_scales' in self.params:
            return np.exp(self.params['log_scales'])
        return np.ones(3)

    def condition(self, sigma: np.ndarray, h: np.ndarray, v: np.ndarray, mode=TRAIN):
        dtype = self.dtype
        noise_feat = rff_embed(np.log(sigma) / 4.0, self.buffers['rff_freq'], self.buffers['rff_phase']).astype(dtype)
        noise_emb, noise_cache = self.noise_mlp.forward(noise_feat, mode)
        h_emb, h_cache = self.h_mlp.forward(np.asarray(h, dtype=dtype), mode)
        v_emb, v_cache = self.v_mlp.forward(np.asarray(v, dtype=dtype), mode)
        enc, dec = cond_embed(noise_emb, h_emb, v_emb, self.variant)
        return enc, dec, {'noise': noise_cache, 'h': h_cache, 'v': v_cache}

    def condition_backward(self, cache, d_enc, d_dec) -> Dict[str, np.ndarray]:
        k = COND_OUT
        if self.variant == Variant.CONCAT_ALL_EMB:
            total = d_enc + d_dec
            d_noise, d_h, d_v = total[:, :k], total[:, k:2 * k], total[:, 2 * k:]
        else:
            d_noise = d_enc[:, :k] + d_dec[:, :k]
            d_h, d_v = d_enc[:, k:], d_dec[:, k:]
        grads = {}
        for name, child, d in (('noise_mlp', self.noise_mlp, d_noise), ('h_mlp', self.h_mlp, d_h),
                               ('v_mlp', self.v_mlp, d_v)):
            _, g = child.backward(cache[name.split('_')[0]], d)
            merge_grads(grads, name, g)
        return grads

    def network(self, x_in, sigma, h, v, mode=TRAIN):
        """F_theta(c_in x; ln(sigma)/4, h, v)"""
        enc, dec, cond_cache = self.condition(sigma, h, v, mode)
        out, unet_cache = self.unet.forward(np.asarray(x_in, dtype=self.dtype), enc, dec, mode)
        return out, {'owner': self, 'cond': cond_cache, 'unet': unet_cache}

    def network_backward(self, cache, upstream):
        cache = self._require_cache(cache)
        dx, unet_grads, d_enc, d_dec = self.unet.backward(cache['unet'], upstream)
        grads = merge_grads({}, 'unet', unet_grads)
        grads.update(self.condition_backward(cache['cond'], d_enc, d_dec))
        return dx, grads


def cond_embed(noise_emb: np.ndarray, h_emb: np.ndarray, v_emb: np.ndarray, variant) -> Tuple[np.ndarray, np.ndarray]:
    """
    Encoder/decoder FiLM conditioning from the three 512-dim factor
    embeddings: [noise, h] and [noise, v], or [noise, h, v] for both.
    """
    variant = Variant(variant)
    for name, emb in (('noise', noise_emb), ('h', h_emb), ('v', v_emb)):
        if emb.ndim != 2 or emb.shape[1] != COND_OUT:
            raise ShapeError(f"{name} embedding must be (N, {COND_OUT}), got {emb.shape}")
    if variant == Variant.CONCAT_ALL_EMB:
        everything = np.concatenate([noise_emb, h_emb, v_emb], axis=1)
        return everything, everything
    return np.concatenate([noise_emb, h_emb], axis=1), np.concatenate([noise_emb, v_emb], axis=1)


def unet_forward(x_in: np.ndarray, enc_cond: np.ndarray, dec_cond: np.ndarray, model: GeneratorModel,
                 mode: str = EVAL) -> np.ndarray:
    out, _ = model.unet.forward(np.asarray(x_in, dtype=model.dtype), enc_cond, dec_cond, mode)
    return out


def _column(values, count: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(values, dtype=np.float64), (count,)).reshape(count, 1, 1)


def denoise(x_tau: np.ndarray, sigma, h: np.ndarray, v: np.ndarray, model: GeneratorModel,
            config: DiffusionConfig) -> np.ndarray:
    """D(x; sigma, h, v) = c_skip x + c_out F(c_in x; ln(sigma)/4, h, v)"""
    x_tau = np.asarray(x_tau, dtype=np.float64)
    count = x_tau.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (count,))
    c_skip, c_out, c_in, _ = precondition_coeffs(sigma, config.sigma_data)
    s_skip, s_out, s_in = model.precondition_scales()
    x_in = s_in * _column(c_in, count) * x_tau
    out, _ = model.network(x_in, sigma, h, v, EVAL)
    return s_skip * _column(c_skip, count) * x_tau + s_out * _column(c_out, count) * out


def pad_time(x: np.ndarray, length: int) -> np.ndarray:
    if x.shape[-1] > length:
        raise ShapeError(f"Response of {x.shape[-1]} samples exceeds the model length {length}")
    pad = [(0, 0)] * (x.ndim - 1) + [(0, length - x.shape[-1])]
    return np.pad(x, pad)


def training_loss_step(x0: np.ndarray, h: np.ndarray, v: np.ndarray, model: GeneratorModel,
                       config: DiffusionConfig, rng: np.random.Generator = None, sigma=None, noise=None,
                       denoiser: Callable = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    lambda(sigma)-weighted squared denoising error averaged over the batch,
    with x_tau = x0 + sigma * eps. Returns (loss, parameter grads); an
    injected denoiser(x_tau, sigma) replaces the network and yields no grads.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if np.max(np.abs(x0)) > 1.0 + 1e-6:
        raise TrainingError(f"Training responses must be max-abs normalized, got peak {np.max(np.abs(x0)):.4g}")
    x0 = pad_time(x0, config.padded_length) if x0.shape[-1] != config.padded_length else x0
    count = x0.shape[0]
    if sigma is None:
        sigma = sigma_draw(rng, config, count)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (count,))
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    x_tau = x0 + sigma[:, None, None] * noise
    c_skip, c_out, c_in, lam = (_column(c, count) for c in precondition_coeffs(sigma, config.sigma_data))

    if denoiser is not None:
        resid = np.asarray(denoiser(x_tau, sigma), dtype=np.float64) - x0
        return float(np.mean(lam[:, 0, 0] * (resid ** 2).sum(axis=(1, 2)))), {}

    s_skip, s_out, s_in = model.precondition_scales()
    x_in = s_in * c_in * x_tau
    out, cache = model.network(x_in, sigma, h, v, TRAIN)
    out = out.astype(np.float64)
    resid = s_skip * c_skip * x_tau + s_out * c_out * out - x0
    loss = float(np.mean(lam[:, 0, 0] * (resid ** 2).sum(axis=(1, 2))))

    d_denoised = 2.0 * lam * resid / count
    d_out = (s_out * c_out * d_denoised).astype(model.dtype)
    dx_in, grads = model.network_backward(cache, d_out)
    if 'log_scales' in model.params:
        grads['log_scales'] = np.array([
            np.sum(d_denoised * s_skip * c_skip * x_tau),
            np.sum(d_denoised * s_out * c_out * out),
            np.sum(dx_in.astype(np.float64) * x_in),
        ])
    return loss, grads


# Sampling -------------------------------------------------------------------------------

def edm_sample(denoiser: Callable[[np.ndarray, float], np.ndarray], shape: Tuple[int, ...],
               config: DiffusionConfig, rng: np.random.Generator) -> Tuple[np.ndarray, List[float]]:
    """
    Stochastic churn sampler: x = sigma_max * eps, then for each schedule
    position inflate the noise by gamma, take an Euler step to the next
    level and apply the Heun correction unless the next level is 0.
    Returns the sample and the visited schedule levels.
    """
    levels = noise_schedule(config).with_terminal
    gamma_max = min(config.s_churn / config.steps, np.sqrt(2.0) - 1.0)
    x = levels[0] * rng.standard_normal(shape)
    visited = []
    for i in range(config.steps):
        sigma, sigma_next = levels[i], levels[i + 1]
        visited.append(float(sigma))
        gamma = gamma_max if config.s_tmin <= sigma <= config.s_tmax else 0.0
        sigma_hat = sigma * (1.0 + gamma)
        if gamma > 0.0:
            x_hat = x + np.sqrt(sigma_hat ** 2 - sigma ** 2) * config.s_noise * rng.standard_normal(shape)
        else:
            x_hat = x
        d = (x_hat - denoiser(x_hat, sigma_hat)) / sigma_hat
        x = x_hat + (sigma_next - sigma_hat) * d
        if sigma_next > 0.0:
            d_next = (x - denoiser(x, sigma_next)) / sigma_next
            x = x_hat + (sigma_next - sigma_hat) * 0.5 * (d + d_next)
    return x, visited


def sample_srir(h: np.ndarray, v: np.ndarray, model: GeneratorModel, config: DiffusionConfig, seed: int,
                source: Sequence[float] = None, receiver: Sequence[float] = None) -> SRIR:
    """Generate one SRIR for embedding h and conditioning vector v"""
    h = np.asarray(h, dtype=np.float64).reshape(1, -1)
    v = np.asarray(v, dtype=np.float64).reshape(1, 3)
    if h.shape[1] != config.h_dim:
        raise ShapeError(f"Embedding h has {h.shape[1]} dimensions, the generator expects {config.h_dim}")
    rng = rng_stream(seed, 'sample')
    shape = (1, config.channels, config.padded_length)
    x, _ = edm_sample(lambda x, s: denoise(x, s, h, v, model, config), shape, config, rng)
    samples = x[0, :, :config.length].astype(np.float32)

    aligned = config.variant_enum != Variant.WITH_TOA
    toa = 0.0
    if not aligned:
        try:
            toa = toa_estimate(samples, config.sample_rate)
        except AnalysisError as e:
            logger.warning(f"Generated response has no detectable onset: {e}")
    source = np.full(3, np.nan) if source is None else np.asarray(source, dtype=np.float64)
    receiver = np.full(3, np.nan) if receiver is None else np.asarray(receiver, dtype=np.float64)
    return SRIR(samples=samples, sample_rate=config.sample_rate, source=source, receiver=receiver,
                aligned=aligned, toa_seconds=toa,
                metadata={'variant': config.variant, 'seed': int(seed), 'v': v[0].tolist()})


# Training --------------------------------------------------------------------------------

@dataclass
class GeneratorExamples:
    responses: np.ndarray  # (M, 4, L) normalized (and aligned unless WITH_TOA)
    embeddings: np.ndarray  # (M, h_dim)
    vectors: np.ndarray  # (M, 3)

    def __len__(self):
        return int(self.responses.shape[0])


@dataclass
class GeneratorTrainingResult:
    model: GeneratorModel
    config: DiffusionConfig
    log: pd.DataFrame
    best_epoch: int


def _validation_loss(model, config, examples: GeneratorExamples, seed: int) -> float:
    rng = rng_stream(seed, 'generator', 'validation')
    losses = []
    for start in range(0, len(examples), config.batch_size):
        sl = slice(start, start + config.batch_size)
        loss, _ = training_loss_step(examples.responses[sl], examples.embeddings[sl], examples.vectors[sl],
                                     model, config, rng, denoiser=lambda x, s: denoise(
                                         x, s, examples.embeddings[sl], examples.vectors[sl], model, config))
        losses.append(loss)
    return float(np.mean(losses))


def fit_generator(train: GeneratorExamples, val: Optional[GeneratorExamples], config: DiffusionConfig,
                  seed: int) -> GeneratorTrainingResult:
    """Adam on the denoising loss with step decay; keeps the best-validation weights"""
    if len(train) == 0:
        raise TrainingError("No training responses for the generator")
    if train.embeddings.shape[1] != config.h_dim:
        raise ConfigurationError(
            f"Encoder embeddings have {train.embeddings.shape[1]} dimensions, generator expects {config.h_dim}")
    config = replace(config, sigma_data=estimate_sigma_data(train.responses))
    logger.info(f"Generator sigma_data = {config.sigma_data:.4f} from {len(train)} responses")
    model = GeneratorModel(config, rng_stream(seed, 'generator', 'init'))
    params = model.named_parameters()
    state = OptimizerState(config.learning_rate, config.lr_decay_factor, config.lr_decay_every)
    shuffle_rng = rng_stream(seed, 'generator', 'shuffle')
    noise_rng = rng_stream(seed, 'generator', 'noise')
    batch = min(config.batch_size, len(train))
    steps = max(len(train) // batch, 1)

    records = []
    best_loss, best_epoch, best_state = np.inf, -1, None
    progress = tqdm(range(config.epochs), desc='generator', disable=not sys.stderr.isatty())
    for epoch in progress:
        state.learning_rate = lr_decay(config.schedule, epoch)
        order = shuffle_rng.permutation(len(train))
        losses = []
        for step in range(steps):
            idx = order[step * batch:(step + 1) * batch]
            loss, grads = training_loss_step(train.responses[idx], train.embeddings[idx], train.vectors[idx],
                                             model, config, noise_rng)
            adam_step(state, params, grads)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        if not np.isfinite(train_loss):
            raise TrainingError(f"Generator training diverged at epoch {epoch}")
        val_loss = _validation_loss(model, config, val, seed) if val is not None and len(val) else float('nan')
        selection = val_loss if np.isfinite(val_loss) else train_loss
        if selection < best_loss:
            best_loss, best_epoch, best_state = selection, epoch, model.snapshot()
        records.append({'epoch': epoch, 'train_loss': train_loss, 'val_loss': val_loss,
                        'learning_rate': state.learning_rate})
        logger.info(f"Generator epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f}")
        progress.set_postfix(train=f'{train_loss:.3f}')

    if best_state is not None:
        model.load_state_dict(best_state)
    return GeneratorTrainingResult(model=model, config=config, log=pd.DataFrame(records), best_epoch=best_epoch)


def train_generator(manifest_path, encoder_path, config: DiffusionConfig, seed: int,
                    out_path=None) -> GeneratorTrainingResult:
    """Frozen encoder embeddings + ground-truth SRIRs from the manifest -> trained generator"""
    from dataset_pipeline import generator_examples
    from room_encoder import load_encoder

    encoder, feature_config, stats = load_encoder(encoder_path)
    if encoder.config.base_channels != config.h_dim:
        raise ConfigurationError(
            f"Encoder produces {encoder.config.base_channels}-dim embeddings, generator expects {config.h_dim}")
    if feature_config.sample_rate != config.sample_rate:
        raise ConfigurationError(
            f"Encoder features run at {feature_config.sample_rate} Hz, generator at {config.sample_rate} Hz")
    train = generator_examples(manifest_path, 'train', encoder, feature_config, stats, config)
    val = generator_examples(manifest_path, 'val', encoder, feature_config, stats, config)
    result = fit_generator(train, val, config, seed)
    if out_path is not None:
        save_generator(out_path, result.model, result.config, {
            'encoder_digest': file_digest(encoder_path),
            'norm_stats_digest': stats.digest,
            'best_epoch': result.best_epoch,
            'seed': int(seed),
        })
        write_csv(Path(out_path).with_suffix('.log.csv'), result.log)
    return result


def save_generator(path, model: GeneratorModel, config: DiffusionConfig, extra: Optional[Dict] = None) -> Path:
    metadata = {'kind': CHECKPOINT_KIND, 'diffusion': asdict(config), 'sigma_data': config.sigma_data}
    metadata.update(extra or {})
    return save_checkpoint(path, model.state_dict(), metadata)


def load_generator(path) -> Tuple[GeneratorModel, DiffusionConfig, Dict]:
    tensors, metadata = load_checkpoint(path)
    if metadata.get('kind') != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a generator checkpoint (kind={metadata.get('kind')})")
    settings = dict(metadata['diffusion'])
    for key in ('channel_mult', 'dilations'):
        settings[key] = tuple(settings[key])
    config = DiffusionConfig(**settings)
    model = GeneratorModel(config)
    model.load_state_dict(tensors)
    return model, config, metadata
