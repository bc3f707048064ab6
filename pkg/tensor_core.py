"""
Tensor Core Module

Minimal trainable-layer substrate for the room encoder and the SRIR
generator:
1. Layers with explicit forward and backward passes (numpy arrays, batch first)
2. Composite modules (sequential stacks, named parameter trees)
3. Adam optimizer and step-wise learning-rate decay
4. Finite-difference gradient checks (64-bit)
5. SRIRCKPT checkpoint container

Layouts: (N, C, T, F) for 2-D layers, (N, C, L) for 1-D layers, (N, D) for
linear layers. Forward returns (output, cache); the cache is owned by the
caller and handed back to backward.
"""

import json
import struct
import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import erf

from audio_io import atomic_write_bytes, dumps_json
from errors import CheckpointError, ConfigurationError, GradientError, ShapeError

logger = logging.getLogger(__name__)

LAYER_KINDS = (
    'conv2d',
    'conv1d-dilated',
    'linear',
    'batchnorm',
    'relu',
    'gelu',
    'maxpool-time',
    'dropout',
    'film',
    'upsample-nearest',
)

TRAIN = 'train'
EVAL = 'eval'

CHECKPOINT_MAGIC = b'SRIRCKPT'
CHECKPOINT_VERSION = 1

Cache = Dict[str, Any]
Grads = Dict[str, np.ndarray]


@dataclass(frozen=True)
class LayerSpec:
    """Layer kind plus its hyperparameters"""
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 1
    stride: int = 1
    dilation: int = 1
    dropout_rate: float = 0.0
    padding: str = 'zero'
    bias: bool = True
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"Unknown layer kind '{self.kind}', choose from {LAYER_KINDS}")
        if self.stride < 1:
            raise ConfigurationError(f"{self.kind}: stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ConfigurationError(f"{self.kind}: dilation must be >= 1, got {self.dilation}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"{self.kind}: dropout rate must be in [0, 1), got {self.dropout_rate}")
        if self.padding != 'zero':
            raise ConfigurationError(f"{self.kind}: only zero padding is supported, got '{self.padding}'")


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    """He-normal initialization, std = sqrt(2 / fan_in)"""
    std = np.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Module:
    """Node of a parameter tree: own parameters, buffers and named children"""

    def __init__(self, name: str = None):
        self.name = name or type(self).__name__
        self.params: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        self.buffers: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        self.children: 'OrderedDict[str, Module]' = OrderedDict()

    def add_child(self, key: str, child: 'Module') -> 'Module':
        self.children[key] = child
        return child

    def named_parameters(self, prefix: str = '') -> 'OrderedDict[str, np.ndarray]':
        out = OrderedDict((prefix + k, v) for k, v in self.params.items())
        for key, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{key}."))
        return out

    def named_buffers(self, prefix: str = '') -> 'OrderedDict[str, np.ndarray]':
        out = OrderedDict((prefix + k, v) for k, v in self.buffers.items())
        for key, child in self.children.items():
            out.update(child.named_buffers(f"{prefix}{key}."))
        return out

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        state = self.named_parameters()
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, tensors: Dict[str, np.ndarray], prefix: str = ''):
        """Copy tensors into existing parameters and buffers (shapes must match)"""
        for store in (self.params, self.buffers):
            for key, current in store.items():
                name = prefix + key
                if name not in tensors:
                    raise CheckpointError(f"Checkpoint is missing tensor '{name}'")
                value = np.asarray(tensors[name])
                if value.shape != current.shape:
                    raise CheckpointError(
                        f"Tensor '{name}' has shape {value.shape}, expected {current.shape}")
                current[...] = value.astype(current.dtype)
        for key, child in self.children.items():
            child.load_state_dict(tensors, f"{prefix}{key}.")

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_dict().items()}

    def astype(self, dtype) -> 'Module':
        """Convert parameters and buffers in place (64-bit mode for gradient checks)"""
        for store in (self.params, self.buffers):
            for key in list(store):
                store[key] = store[key].astype(dtype)
        for child in self.children.values():
            child.astype(dtype)
        return self

    @property
    def dtype(self):
        for value in self.named_parameters().values():
            return value.dtype
        return np.dtype(np.float32)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.named_parameters().values()))

    def _require_cache(self, cache: Optional[Cache]) -> Cache:
        if cache is None or cache.get('owner') is not self:
            raise GradientError(f"{self.name}: backward called without a cached forward pass")
        return cache

    def __repr__(self):
        return f'<{type(self).__name__} {self.name}: {self.parameter_count()} parameters>'


class Layer(Module):
    """Single operator described by a LayerSpec"""

    def __init__(self, spec: LayerSpec, name: str = None):
        super().__init__(name or spec.kind)
        self.spec = spec

    def forward(self, x: np.ndarray, mode: str = TRAIN, rng: np.random.Generator = None,
                **conditioning) -> Tuple[np.ndarray, Cache]:
        raise NotImplementedError

    def backward(self, cache: Cache, upstream: np.ndarray) -> Tuple[np.ndarray, Grads]:
        raise NotImplementedError

    def _check_rank(self, x: np.ndarray, rank: int, layout: str):
        if x.ndim != rank:
            raise ShapeError(f"{self.name} ({self.spec.kind}): expected {layout} input, got shape {x.shape}")

    def _check_channels(self, x: np.ndarray):
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"{self.name} ({self.spec.kind}): channel dimension is {x.shape[1]}, "
                f"expected {self.spec.in_channels}")


class Conv2d(Layer):
    """2-D convolution over (time, frequency), zero padding, ceil-mode output size"""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32, name: str = None):
        super().__init__(spec, name)
        k = spec.kernel_size
        fan_in = spec.in_channels * k * k
        self.params['weight'] = he_normal(rng, (spec.out_channels, spec.in_channels, k, k), fan_in, dtype)
        if spec.bias:
            self.params['bias'] = np.zeros(spec.out_channels, dtype=dtype)
        self.pad = (k - 1) // 2

    def output_size(self, size: int) -> int:
        k, s = self.spec.kernel_size, self.spec.stride
        return (size + 2 * self.pad - k) // s + 1

    def forward(self, x, mode=TRAIN, rng=None, **conditioning):
        self._check_rank(x, 4, '(N, C, T, F)')
        self._check_channels(x)
        k, s, p = self.spec.kernel_size, self.spec.stride, self.pad
        n, _, h, w = x.shape
        ho, wo = self.output_size(h), self.output_size(w)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name} (conv2d): input {h}x{w} too small for kernel {k}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        weight = self.params['weight']
        y = np.zeros((n, self.spec.out_channels, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                y += np.tensordot(patch, weight[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
        if 'bias' in self.params:
            y += self.params['bias'][None, :, None, None]
        return y, {'owner': self, 'xp': xp, 'shape': x.shape}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        xp = cache['xp']
        k, s, p = self.spec.kernel_size, self.spec.stride, self.pad
        _, _, h, w = cache['shape']
        ho, wo = upstream.shape[2], upstream.shape[3]
        weight = self.params['weight']
        dxp = np.zeros_like(xp)
        dweight = np.zeros_like(weight)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                patch = xp[sl]
                dweight[:, :, i, j] = np.tensordot(upstream, patch, axes=([0, 2, 3], [0, 2, 3]))
                dxp[sl] += np.tensordot(upstream, weight[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        grads = {'weight': dweight}
        if 'bias' in self.params:
            grads['bias'] = upstream.sum(axis=(0, 2, 3))
        return dxp[:, :, p:p + h, p:p + w], grads


class Conv1d(Layer):
    """1-D dilated convolution along time; stride 2 halves the length (ceil mode)"""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32, name: str = None,
                 zero_init: bool = False):
        super().__init__(spec, name)
        k = spec.kernel_size
        shape = (spec.out_channels, spec.in_channels, k)
        if zero_init:
            self.params['weight'] = np.zeros(shape, dtype=dtype)
        else:
            self.params['weight'] = he_normal(rng, shape, spec.in_channels * k, dtype)
        if spec.bias:
            self.params['bias'] = np.zeros(spec.out_channels, dtype=dtype)
        span = spec.dilation * (k - 1)
        self.pad_left = span // 2
        self.pad_right = span - self.pad_left

    def output_size(self, size: int) -> int:
        span = self.spec.dilation * (self.spec.kernel_size - 1)
        return (size + self.pad_left + self.pad_right - span - 1) // self.spec.stride + 1

    def forward(self, x, mode=TRAIN, rng=None, **conditioning):
        self._check_rank(x, 3, '(N, C, L)')
        self._check_channels(x)
        k, s, d = self.spec.kernel_size, self.spec.stride, self.spec.dilation
        n, _, length = x.shape
        lo = self.output_size(length)
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad_left, self.pad_right)))
        weight = self.params['weight']
        y = np.zeros((n, self.spec.out_channels, lo), dtype=x.dtype)
        for i in range(k):
            start = i * d
            patch = xp[:, :, start:start + s * (lo - 1) + 1:s]
            y += np.tensordot(patch, weight[:, :, i], axes=([1], [1])).transpose(0, 2, 1)
        if 'bias' in self.params:
            y += self.params['bias'][None, :, None]
        return y, {'owner': self, 'xp': xp, 'length': length}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        xp = cache['xp']
        k, s, d = self.spec.kernel_size, self.spec.stride, self.spec.dilation
        lo = upstream.shape[2]
        weight = self.params['weight']
        dxp = np.zeros_like(xp)
        dweight = np.zeros_like(weight)
        for i in range(k):
            start = i * d
            sl = (slice(None), slice(None), slice(start, start + s * (lo - 1) + 1, s))
            dweight[:, :, i] = np.tensordot(upstream, xp[sl], axes=([0, 2], [0, 2]))
            dxp[sl] += np.tensordot(upstream, weight[:, :, i], axes=([1], [0])).transpose(0, 2, 1)
        grads = {'weight': dweight}
        if 'bias' in self.params:
            grads['bias'] = upstream.sum(axis=(0, 2))
        return dxp[:, :, self.pad_left:self.pad_left + cache['length']], grads


class Linear(Layer):
    """Affine map y = x W^T + b"""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32, name: str = None,
                 zero_init: bool = False):
        super().__init__(spec, name)
        shape = (spec.out_channels, spec.in_channels)
        if zero_init:
            self.params['weight'] = np.zeros(shape, dtype=dtype)
        else:
            self.params['weight'] = he_normal(rng, shape, spec.in_channels, dtype)
        if spec.bias:
            self.params['bias'] = np.zeros(spec.out_channels, dtype=dtype)

    def forward(self, x, mode=TRAIN, rng=None, **conditioning):
        self._check_rank(x, 2, '(N, D)')
        self._check_channels(x)
        y = x @ self.params['weight'].T
        if 'bias' in self.params:
            y = y + self.params['bias']
        return y, {'owner': self, 'x': x}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        grads = {'weight': upstream.T @ cache['x']}
        if 'bias' in self.params:
            grads['bias'] = upstream.sum(axis=0)
        return upstream @ self.params['weight'], grads


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis except the channel axis"""

    def __init__(self, spec: LayerSpec, dtype=np.float32, name: str = None):
        super().__init__(spec, name)
        c = spec.in_channels
        self.params['gamma'] = np.ones(c, dtype=dtype)
        self.params['beta'] = np.zeros(c, dtype=dtype)
        self.buffers['running_mean'] = np.zeros(c, dtype=dtype)
        self.buffers['running_var'] = np.ones(c, dtype=dtype)

    @staticmethod
    def _axes(x):
        return (0,) + tuple(range(2, x.ndim))

    def _expand(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x, mode=TRAIN, rng=None, **conditioning):
        if x.ndim < 2:
            raise ShapeError(f"{self.name} (batchnorm): expected (N, C, ...) input, got shape {x.shape}")
        self._check_channels(x)
        axes = self._axes(x)
        eps = self.spec.eps
        if mode == TRAIN:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // x.shape[1]
            m = self.spec.momentum
            unbiased = var * count / max(count - 1, 1)
            self.buffers['running_mean'][...] = (1 - m) * self.buffers['running_mean'] + m * mean
            self.buffers['running_var'][...] = (1 - m) * self.buffers['running_var'] + m * unbiased
        else:
            mean = self.buffers['running_mean']
            var = self.buffers['running_var']
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - self._expand(mean, x)) * self._expand(inv_std, x)
        y = self._expand(self.params['gamma'], x) * x_hat + self._expand(self.params['beta'], x)
        return y.astype(x.dtype), {'owner': self, 'x_hat': x_hat, 'inv_std': inv_std, 'mode': mode}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        x_hat, inv_std = cache['x_hat'], cache['inv_std']
        axes = self._axes(upstream)
        grads = {
            'gamma': (upstream * x_hat).sum(axis=axes),
            'beta': upstream.sum(axis=axes),
        }
        dx_hat = upstream * self._expand(self.params['gamma'], upstream)
        if cache['mode'] == TRAIN:
            dx = (dx_hat - dx_hat.mean(axis=axes, keepdims=True)
                  - x_hat * (dx_hat * x_hat).mean(axis=axes, keepdims=True))
            dx = dx * self._expand(inv_std, upstream)
        else:
            dx = dx_hat * self._expand(inv_std, upstream)
        return dx, grads


class ReLU(Layer):

    def forward(self, x, mode=TRAIN, rng=None, **conditioning):
        mask = x > 0
        return x * mask, {'owner': self, 'mask': mask}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        return upstream * cache['mask'], {}


class GELU(Layer):
    """Exact (erf) GeLU"""

    def forward(self, x, mode=TRAIN, rng=None, **conditioning):
        cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        return (x * cdf).astype(x.dtype), {'owner': self, 'x': x, 'cdf': cdf}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        x = cache['x']
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (upstream * (cache['cdf'] + x * pdf)).astype(upstream.dtype), {}


class MaxPoolTime(Layer):
    """Max over the time axis of (N, C, T, F), giving (N, C, F)"""

    def forward(self, x, mode=TRAIN, rng=None, **conditioning):
        self._check_rank(x, 4, '(N, C, T, F)')
        idx = np.argmax(x, axis=2)
        y = np.take_along_axis(x, idx[:, :, None, :], axis=2)[:, :, 0, :]
        return y, {'owner': self, 'idx': idx, 'shape': x.shape}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        dx = np.zeros(cache['shape'], dtype=upstream.dtype)
        np.put_along_axis(dx, cache['idx'][:, :, None, :], upstream[:, :, None, :], axis=2)
        return dx, {}


class Dropout(Layer):
    """Inverted dropout; identity in eval mode"""

    def forward(self, x, mode=TRAIN, rng=None, **conditioning):
        rate = self.spec.dropout_rate
        if mode != TRAIN or rate == 0.0:
            return x, {'owner': self, 'mask': None}
        if rng is None:
            raise ConfigurationError(f"{self.name} (dropout): train mode needs an explicit rng")
        mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
        return x * mask, {'owner': self, 'mask': mask}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        if cache['mask'] is None:
            return upstream, {}
        return upstream * cache['mask'], {}


class FiLM(Layer):
    """Feature-wise modulation (1 + gamma_hat) * x + beta, per channel"""

    def forward(self, x, mode=TRAIN, rng=None, gamma_hat=None, beta=None, **conditioning):
        if gamma_hat is None or beta is None:
            raise ShapeError(f"{self.name} (film): gamma_hat and beta are required")
        if gamma_hat.shape != x.shape[:2] or beta.shape != x.shape[:2]:
            raise ShapeError(
                f"{self.name} (film): modulation shapes {gamma_hat.shape}/{beta.shape} "
                f"do not match (N, C) = {x.shape[:2]}")
        tail = (1,) * (x.ndim - 2)
        g = gamma_hat.reshape(gamma_hat.shape + tail)
        b = beta.reshape(beta.shape + tail)
        return (1.0 + g) * x + b, {'owner': self, 'x': x, 'g': g}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        axes = tuple(range(2, upstream.ndim))
        grads = {
            'gamma_hat': (upstream * cache['x']).sum(axis=axes),
            'beta': upstream.sum(axis=axes),
        }
        return upstream * (1.0 + cache['g']), grads


class UpsampleNearest(Layer):
    """Nearest-neighbour x2 upsampling along the last axis"""

    def forward(self, x, mode=TRAIN, rng=None, **conditioning):
        return np.repeat(x, 2, axis=-1), {'owner': self}

    def backward(self, cache, upstream):
        self._require_cache(cache)
        shape = upstream.shape[:-1] + (upstream.shape[-1] // 2, 2)
        return upstream.reshape(shape).sum(axis=-1), {}


def build_layer(spec: LayerSpec, rng: np.random.Generator = None, dtype=np.float32,
                name: str = None, zero_init: bool = False) -> Layer:
    """Construct the layer for a spec (He-normal weights, batchnorm gamma=1 beta=0)"""
    rng = rng if rng is not None else np.random.default_rng(0)
    if spec.kind == 'conv2d':
        return Conv2d(spec, rng, dtype, name)
    if spec.kind == 'conv1d-dilated':
        return Conv1d(spec, rng, dtype, name, zero_init=zero_init)
    if spec.kind == 'linear':
        return Linear(spec, rng, dtype, name, zero_init=zero_init)
    if spec.kind == 'batchnorm':
        return BatchNorm(spec, dtype, name)
    simple = {
        'relu': ReLU,
        'gelu': GELU,
        'maxpool-time': MaxPoolTime,
        'dropout': Dropout,
        'film': FiLM,
        'upsample-nearest': UpsampleNearest,
    }
    return simple[spec.kind](spec, name)


class Sequential(Module):
    """Layers applied in order"""

    def __init__(self, layers: List[Layer], name: str = None):
        super().__init__(name)
        for i, layer in enumerate(layers):
            self.add_child(str(i), layer)

    def forward(self, x, mode=TRAIN, rng=None):
        caches = []
        for layer in self.children.values():
            x, cache = layer.forward(x, mode=mode, rng=rng)
            caches.append(cache)
        return x, {'owner': self, 'caches': caches}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        grads = {}
        for (key, layer), layer_cache in zip(reversed(list(self.children.items())), reversed(cache['caches'])):
            upstream, layer_grads = layer.backward(layer_cache, upstream)
            merge_grads(grads, key, layer_grads)
        return upstream, grads


def merge_grads(into: Grads, prefix: str, grads: Grads) -> Grads:
    """Add child gradients under a dotted prefix, accumulating shared names"""
    for name, g in grads.items():
        key = f"{prefix}.{name}" if prefix else name
        if key in into:
            into[key] = into[key] + g
        else:
            into[key] = g
    return into


def mlp(sizes: List[int], rng: np.random.Generator, dtype=np.float32, name: str = None,
        dropout: float = 0.0) -> Sequential:
    """Linear/ReLU stack; no activation after the last layer"""
    layers: List[Layer] = []
    if dropout > 0.0:
        layers.append(build_layer(LayerSpec('dropout', dropout_rate=dropout)))
    for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(build_layer(LayerSpec('linear', in_channels=d_in, out_channels=d_out), rng, dtype))
        if i < len(sizes) - 2:
            layers.append(build_layer(LayerSpec('relu')))
    return Sequential(layers, name)


def l2_normalize(u: np.ndarray, eps: float = 1e-12) -> Tuple[np.ndarray, Cache]:
    norm = np.sqrt((u * u).sum(axis=-1, keepdims=True)) + eps
    z = u / norm
    return z, {'z': z, 'norm': norm}


def l2_normalize_backward(cache: Cache, upstream: np.ndarray) -> np.ndarray:
    z, norm = cache['z'], cache['norm']
    return (upstream - z * (z * upstream).sum(axis=-1, keepdims=True)) / norm


# Module-level entry points ---------------------------------------------------

def layer_forward(layer: Layer, x: np.ndarray, mode: str = TRAIN, rng: np.random.Generator = None,
                  **conditioning) -> Tuple[np.ndarray, Cache]:
    """Run one layer; returns (output, cache)"""
    if mode not in (TRAIN, EVAL):
        raise ConfigurationError(f"mode must be '{TRAIN}' or '{EVAL}', got '{mode}'")
    y, cache = layer.forward(x, mode=mode, rng=rng, **conditioning)
    if not np.all(np.isfinite(y)):
        raise GradientError(f"{layer.name} ({layer.spec.kind}): non-finite forward output")
    return y, cache


def layer_backward(layer: Layer, cache: Optional[Cache], upstream: np.ndarray) -> Tuple[np.ndarray, Grads]:
    """Gradients with respect to the layer input and its parameters"""
    if cache is None:
        raise GradientError(f"{layer.name} ({layer.spec.kind}): backward called without a cached forward pass")
    return layer.backward(cache, upstream)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise GradientError("Non-finite value during gradient check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(loss_fn: Callable[[], float], arrays: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray],
                    epsilon: float = 1e-6, max_entries: int = None,
                    rng: np.random.Generator = None) -> Tuple[float, Dict[str, float]]:
    """
    Central-difference check of analytic gradients.

    loss_fn takes no arguments and reads the arrays in place; each array entry
    is perturbed by +/- epsilon and restored. With max_entries, a random subset
    of entries per array is checked.

    Returns (max relative error, per-array max relative error).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    per_array = {}
    for name, array in arrays.items():
        if array.dtype != np.float64:
            raise GradientError(f"Gradient check needs 64-bit arrays, '{name}' is {array.dtype}")
        flat = array.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.zeros(indices.size)
        for n, idx in enumerate(indices):
            original = flat[idx]
            flat[idx] = original + epsilon
            plus = loss_fn()
            flat[idx] = original - epsilon
            minus = loss_fn()
            flat[idx] = original
            numeric[n] = (plus - minus) / (2.0 * epsilon)
        per_array[name] = _relative_error(np.asarray(analytic[name]).reshape(-1)[indices], numeric)
    worst = max(per_array.values()) if per_array else 0.0
    return worst, per_array


def grad_check(layer: Layer, x: np.ndarray, epsilon: float = 1e-6, mode: str = TRAIN, seed: int = 0,
               max_entries: int = None, **conditioning) -> float:
    """
    Max relative error between backward-pass gradients and central differences
    over the layer input, its parameters and any FiLM modulation inputs.
    """
    if x.dtype != np.float64 or any(p.dtype != np.float64 for p in layer.named_parameters().values()):
        raise GradientError(f"{layer.name}: gradient checks run in 64-bit mode")
    x = x.copy()
    conditioning = {k: np.array(v, dtype=np.float64) for k, v in conditioning.items()}

    def run():
        y, cache = layer.forward(x, mode=mode, rng=np.random.default_rng(seed), **conditioning)
        if not np.all(np.isfinite(y)):
            raise GradientError(f"{layer.name}: non-finite forward output during gradient check")
        return y, cache

    y, cache = run()
    upstream = np.random.default_rng(seed + 1).standard_normal(y.shape)
    dx, grads = layer.backward(cache, upstream)

    def loss():
        out, _ = run()
        return float((out * upstream).sum())

    arrays = {'input': x}
    analytic = {'input': dx}
    for name, p in layer.params.items():
        arrays[name] = p
        analytic[name] = grads[name]
    for name, c in conditioning.items():
        arrays[name] = c
        analytic[name] = grads[name]
    worst, per_array = check_gradients(loss, arrays, analytic, epsilon, max_entries)
    logger.debug(f"Gradient check {layer.name}: {per_array}")
    return worst


# Optimizer ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments plus the step-decay schedule"""
    learning_rate: float
    decay_factor: float = 1.0
    decay_every: int = 1
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class LRSchedule:
    initial: float
    factor: float
    every_n_epochs: int


def lr_decay(schedule: LRSchedule, epoch: int) -> float:
    """lr = initial * factor ** floor(epoch / every_n_epochs)"""
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    return schedule.initial * schedule.factor ** (epoch // schedule.every_n_epochs)


def adam_step(state: OptimizerState, params: Dict[str, np.ndarray], grads: Grads,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    """Bias-corrected Adam update, applied to the parameter arrays in place"""
    for name, g in grads.items():
        if name in params and not np.all(np.isfinite(g)):
            raise GradientError(f"Non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    lr = state.learning_rate
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {g.shape}, parameter is {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p, dtype=np.float64)
            v = np.zeros_like(p, dtype=np.float64)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return state


# Checkpoint container -------------------------------------------------------------

def save_checkpoint(path, tensors: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> Path:
    """
    Binary layout: magic, u32 version, u32 entry count, then per entry
    {u32 name length, UTF-8 name, u32 ndim, u64 dims, float32 data};
    trailer: u64 length + UTF-8 JSON metadata. All little-endian.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack('<II', CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype='<f4')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<I', data.ndim))
        chunks.append(struct.pack(f'<{data.ndim}Q', *data.shape))
        chunks.append(data.tobytes())
    meta = dumps_json(metadata).encode('utf-8')
    chunks.append(struct.pack('<Q', len(meta)))
    chunks.append(meta)
    path = atomic_write_bytes(path, b''.join(chunks))
    logger.info(f"Checkpoint written: {path} ({len(tensors)} tensors)")
    return path


def load_checkpoint(path) -> Tuple['OrderedDict[str, np.ndarray]', Dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}")
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not an SRIRCKPT container")
    try:
        offset = len(CHECKPOINT_MAGIC)
        version, count = struct.unpack_from('<II', blob, offset)
        offset += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        tensors: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (ndim,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            dims = struct.unpack_from(f'<{ndim}Q', blob, offset)
            offset += 8 * ndim
            size = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(blob, dtype='<f4', count=size, offset=offset)
            offset += 4 * size
            tensors[name] = data.reshape(dims).astype(np.float32)
        (meta_len,) = struct.unpack_from('<Q', blob, offset)
        offset += 8
        metadata = json.loads(blob[offset:offset + meta_len].decode('utf-8'))
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})")
    return tensors, metadata


def file_digest(path) -> str:
    """SHA-256 of a file's bytes"""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
