"""
Room Encoder Module

Residual convolutional encoder mapping scene tensors to room embeddings h,
a projection head producing unit-norm z, and NT-Xent contrastive training
on same-room scene pairs. After training the encoder is frozen and only h
is used downstream.
"""

import sys
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from tqdm import tqdm

from audio_io import write_csv
from config import rng_stream
from errors import CheckpointError, ConfigurationError, ShapeError, TrainingError
from features import FeatureConfig, NormStats, dataset_stats, normalize_planes, scene_planes
from tensor_core import (
    EVAL, TRAIN, LRSchedule, LayerSpec, Module, OptimizerState, Sequential,
    adam_step, build_layer, l2_normalize, l2_normalize_backward, load_checkpoint,
    lr_decay, merge_grads, mlp, save_checkpoint,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'room-encoder'


@dataclass(frozen=True)
class EncoderConfig:
    block_count: int = 9
    base_channels: int = 128
    projection_hidden: int = 256
    embedding_dim: int = 128
    input_bins: int = 257
    epochs: int = 125
    batch_size: int = 16
    learning_rate: float = 3e-4
    temperature: float = 0.1
    dropout: float = 0.1
    kernel_size: int = 3
    lr_decay_factor: float = 0.98
    lr_decay_every: int = 2
    input_planes: int = 8

    def __post_init__(self):
        if self.block_count < 1:
            raise ConfigurationError(f"block_count must be >= 1, got {self.block_count}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        bins = self.input_bins
        for _ in range(self.block_count):
            bins = -(-bins // 2)
        if bins != 1:
            raise ConfigurationError(
                f"{self.block_count} stride-2 blocks reduce {self.input_bins} frequency bins to {bins}, not 1")

    @property
    def schedule(self) -> LRSchedule:
        return LRSchedule(self.learning_rate, self.lr_decay_factor, self.lr_decay_every)


class ResidualBlock(Module):
    """Two conv-batchnorm-ReLU stages (the first with stride 2) plus a strided conv-batchnorm shortcut"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng, dtype=np.float32,
                 name: str = None):
        super().__init__(name)
        conv = lambda cin, stride, k: build_layer(
            LayerSpec('conv2d', in_channels=cin, out_channels=out_channels, kernel_size=k, stride=stride), rng, dtype)
        bn = lambda: build_layer(LayerSpec('batchnorm', in_channels=out_channels), dtype=dtype)
        relu = lambda: build_layer(LayerSpec('relu'))
        self.main = self.add_child('main', Sequential([
            conv(in_channels, 2, kernel_size), bn(), relu(),
            conv(out_channels, 1, kernel_size), bn(), relu(),
        ]))
        self.skip = self.add_child('skip', Sequential([conv(in_channels, 2, 1), bn()]))

    def forward(self, x, mode=TRAIN, rng=None):
        a, main_cache = self.main.forward(x, mode, rng)
        r, skip_cache = self.skip.forward(x, mode, rng)
        return a + r, {'owner': self, 'main': main_cache, 'skip': skip_cache}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        grads = {}
        dx_main, g_main = self.main.backward(cache['main'], upstream)
        dx_skip, g_skip = self.skip.backward(cache['skip'], upstream)
        merge_grads(grads, 'main', g_main)
        merge_grads(grads, 'skip', g_skip)
        return dx_main + dx_skip, grads


class RoomEncoder(Module):
    """(N, 8, T, F) -> h (N, base_channels): residual stride cascade to F = 1, then max over time"""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__('encoder')
        self.config = config
        blocks = []
        channels = config.input_planes
        for _ in range(config.block_count):
            blocks.append(ResidualBlock(channels, config.base_channels, config.kernel_size, rng, dtype))
            channels = config.base_channels
        self.blocks = self.add_child('blocks', Sequential(blocks))
        self.pool = build_layer(LayerSpec('maxpool-time'))

    def forward(self, x, mode=TRAIN, rng=None):
        if x.ndim != 4 or x.shape[1] != self.config.input_planes or x.shape[3] != self.config.input_bins:
            raise ShapeError(
                f"Encoder expects (N, {self.config.input_planes}, T, {self.config.input_bins}), got {x.shape}")
        y, blocks_cache = self.blocks.forward(x, mode, rng)
        pooled, pool_cache = self.pool.forward(y, mode)
        return pooled[:, :, 0], {'owner': self, 'blocks': blocks_cache, 'pool': pool_cache}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        dy, _ = self.pool.backward(cache['pool'], upstream[:, :, None])
        dx, block_grads = self.blocks.backward(cache['blocks'], dy)
        return dx, merge_grads({}, 'blocks', block_grads)


class ProjectionHead(Module):
    """dropout -> linear(hidden) -> ReLU -> linear(embedding_dim) -> L2 normalize"""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__('head')
        self.mlp = self.add_child('mlp', mlp(
            [config.base_channels, config.projection_hidden, config.embedding_dim], rng, dtype,
            dropout=config.dropout))

    def forward(self, h, mode=TRAIN, rng=None):
        u, mlp_cache = self.mlp.forward(h, mode, rng)
        z, norm_cache = l2_normalize(u)
        return z, {'owner': self, 'mlp': mlp_cache, 'norm': norm_cache}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        du = l2_normalize_backward(cache['norm'], upstream)
        dh, grads = self.mlp.backward(cache['mlp'], du)
        return dh, merge_grads({}, 'mlp', grads)


class EncoderModel(Module):
    """Encoder plus projection head, the unit trained by the contrastive loss"""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator = None, dtype=np.float32):
        super().__init__('encoder_model')
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.encoder = self.add_child('encoder', RoomEncoder(config, rng, dtype))
        self.head = self.add_child('head', ProjectionHead(config, rng, dtype))

    def forward(self, x, mode=TRAIN, rng=None):
        h, enc_cache = self.encoder.forward(x, mode, rng)
        z, head_cache = self.head.forward(h, mode, rng)
        return z, {'owner': self, 'h': h, 'encoder': enc_cache, 'head': head_cache}

    def backward(self, cache, upstream):
        cache = self._require_cache(cache)
        dh, head_grads = self.head.backward(cache['head'], upstream)
        dx, enc_grads = self.encoder.backward(cache['encoder'], dh)
        grads = merge_grads({}, 'head', head_grads)
        return dx, merge_grads(grads, 'encoder', enc_grads)


def encoder_forward(x: np.ndarray, model: EncoderModel, mode: str = EVAL, rng=None) -> np.ndarray:
    """Room embeddings h for a batch (N, 8, T, F) or a single (8, T, F) tensor"""
    single = x.ndim == 3
    batch = x[None] if single else x
    h, _ = model.encoder.forward(batch.astype(model.dtype), mode, rng)
    return h[0] if single else h


def project(h: np.ndarray, model: EncoderModel, mode: str = EVAL, rng=None) -> np.ndarray:
    single = h.ndim == 1
    z, _ = model.head.forward(h[None] if single else h, mode, rng)
    return z[0] if single else z


# Contrastive loss -------------------------------------------------------------------

def _pair_index(count: int) -> np.ndarray:
    return np.arange(count) ^ 1


def nt_xent_loss_and_grad(z: np.ndarray, temperature: float) -> Tuple[float, np.ndarray]:
    """
    NT-Xent over 2N embeddings where rows (2k, 2k+1) are positive pairs.
    Returns the mean loss over all anchors and its gradient with respect to z.
    """
    z = np.asarray(z, dtype=np.float64)
    count = z.shape[0]
    if count == 0 or count % 2:
        raise ShapeError(f"NT-Xent needs an even, non-zero number of embeddings, got {count}")
    sim = z @ z.T / temperature
    np.fill_diagonal(sim, -np.inf)
    positive = _pair_index(count)
    rows = np.arange(count)
    log_norm = logsumexp(sim, axis=1)
    loss = float(np.mean(log_norm - sim[rows, positive]))

    softmax = np.exp(sim - log_norm[:, None])
    softmax[rows, rows] = 0.0
    softmax[rows, positive] -= 1.0
    g = softmax / count
    dz = (g + g.T) @ z / temperature
    return loss, dz


def nt_xent_loss(z: np.ndarray, temperature: float = 0.1) -> float:
    return nt_xent_loss_and_grad(z, temperature)[0]


def pair_batch(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Interleave two (N, ...) arrays into (2N, ...) ordered as positive pairs"""
    out = np.empty((2 * first.shape[0],) + first.shape[1:], dtype=first.dtype)
    out[0::2] = first
    out[1::2] = second
    return out


def embedding_triplet_accuracy(h_a: np.ndarray, h_b: np.ndarray) -> float:
    """
    Fraction of (anchor, same-room, other-room) triples where the same-room
    scene is closer in h-space. Rows of h_a and h_b are the two scenes of
    each room; every scene of every other room serves as a negative.
    """
    h_a = np.asarray(h_a, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    rooms = h_a.shape[0]
    if rooms < 2:
        raise TrainingError("Triplet accuracy needs at least two rooms")
    scenes = np.concatenate([h_a, h_b])
    room_of = np.concatenate([np.arange(rooms), np.arange(rooms)])
    partner = np.concatenate([np.arange(rooms) + rooms, np.arange(rooms)])
    dist = np.linalg.norm(scenes[:, None, :] - scenes[None, :, :], axis=-1)
    wins = total = 0
    for anchor in range(2 * rooms):
        positive = dist[anchor, partner[anchor]]
        negatives = dist[anchor, room_of != room_of[anchor]]
        wins += int(np.sum(positive < negatives))
        total += negatives.size
    return wins / total


# Training ----------------------------------------------------------------------------

@dataclass
class EncoderTrainingResult:
    model: EncoderModel
    stats: NormStats
    log: pd.DataFrame
    best_epoch: int


def prepare_tensors(pairs: Sequence[Tuple[str, np.ndarray, np.ndarray]], feature_config: FeatureConfig,
                    stats: Optional[NormStats] = None) -> Tuple[List[str], np.ndarray, np.ndarray, NormStats]:
    """Feature planes for every (room_id, scene_a, scene_b); statistics from these scenes unless given"""
    room_ids = [room_id for room_id, _, _ in pairs]
    planes_a = np.stack([scene_planes(a, feature_config) for _, a, _ in pairs])
    planes_b = np.stack([scene_planes(b, feature_config) for _, _, b in pairs])
    if stats is None:
        stats = dataset_stats(list(planes_a) + list(planes_b), source='train')
    tensors_a = np.stack([normalize_planes(p, stats) for p in planes_a]).astype(np.float32)
    tensors_b = np.stack([normalize_planes(p, stats) for p in planes_b]).astype(np.float32)
    return room_ids, tensors_a, tensors_b, stats


def _validation_loss(model: EncoderModel, tensors_a: np.ndarray, tensors_b: np.ndarray,
                     config: EncoderConfig) -> float:
    z_a = project(encoder_forward(tensors_a, model, EVAL), model, EVAL)
    z_b = project(encoder_forward(tensors_b, model, EVAL), model, EVAL)
    return nt_xent_loss(pair_batch(z_a, z_b), config.temperature)


def fit_encoder(train_pairs, val_pairs, config: EncoderConfig, feature_config: FeatureConfig,
                seed: int) -> EncoderTrainingResult:
    """NT-Xent training with Adam and step decay; keeps the best-validation weights"""
    if len(train_pairs) < config.batch_size:
        raise TrainingError(
            f"{len(train_pairs)} training rooms cannot fill a batch of {config.batch_size}")
    if config.batch_size < 1:
        raise TrainingError("batch_size must be >= 1")
    _, train_a, train_b, stats = prepare_tensors(train_pairs, feature_config)
    have_val = len(val_pairs) >= 2
    if have_val:
        _, val_a, val_b, _ = prepare_tensors(val_pairs, feature_config, stats)
    else:
        logger.warning("Fewer than two validation rooms: selecting weights by training loss")

    model = EncoderModel(config, rng_stream(seed, 'encoder', 'init'))
    params = model.named_parameters()
    state = OptimizerState(config.learning_rate, config.lr_decay_factor, config.lr_decay_every)
    shuffle_rng = rng_stream(seed, 'encoder', 'shuffle')
    dropout_rng = rng_stream(seed, 'encoder', 'dropout')
    rooms = train_a.shape[0]
    steps = rooms // config.batch_size

    records = []
    best_loss, best_epoch, best_state = np.inf, -1, None
    progress = tqdm(range(config.epochs), desc='encoder', disable=not sys.stderr.isatty())
    for epoch in progress:
        state.learning_rate = lr_decay(config.schedule, epoch)
        order = shuffle_rng.permutation(rooms)
        losses = []
        for step in range(steps):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            batch = pair_batch(train_a[idx], train_b[idx])
            z, cache = model.forward(batch, TRAIN, dropout_rng)
            loss, dz = nt_xent_loss_and_grad(z, config.temperature)
            _, grads = model.backward(cache, dz.astype(z.dtype))
            adam_step(state, params, grads)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        if not np.isfinite(train_loss):
            raise TrainingError(f"Encoder training diverged at epoch {epoch}")
        val_loss = _validation_loss(model, val_a, val_b, config) if have_val else float('nan')
        selection = val_loss if have_val else train_loss
        if selection < best_loss:
            best_loss, best_epoch, best_state = selection, epoch, model.snapshot()
        records.append({'epoch': epoch, 'train_loss': train_loss, 'val_loss': val_loss,
                        'learning_rate': state.learning_rate})
        logger.info(f"Encoder epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} lr {state.learning_rate:.3g}")
        progress.set_postfix(train=f'{train_loss:.3f}')

    if best_state is not None:
        model.load_state_dict(best_state)
    logger.info(f"Encoder training done, best epoch {best_epoch} (loss {best_loss:.4f})")
    return EncoderTrainingResult(model=model, stats=stats, log=pd.DataFrame(records), best_epoch=best_epoch)


def train_encoder(manifest_path, config: EncoderConfig, feature_config: FeatureConfig, seed: int,
                  out_path=None) -> EncoderTrainingResult:
    """Train from a dataset manifest; writes the checkpoint and training log when out_path is given"""
    from dataset_pipeline import load_scene_pairs

    train_pairs = load_scene_pairs(manifest_path, 'train', feature_config.sample_rate)
    val_pairs = load_scene_pairs(manifest_path, 'val', feature_config.sample_rate)
    result = fit_encoder(train_pairs, val_pairs, config, feature_config, seed)
    if out_path is not None:
        save_encoder(out_path, result.model, feature_config, result.stats,
                     {'best_epoch': result.best_epoch, 'seed': int(seed)})
        write_csv(Path(out_path).with_suffix('.log.csv'), result.log)
    return result


# Checkpoints --------------------------------------------------------------------------

def save_encoder(path, model: EncoderModel, feature_config: FeatureConfig, stats: NormStats,
                 extra: Optional[Dict] = None) -> Path:
    metadata = {
        'kind': CHECKPOINT_KIND,
        'encoder': asdict(model.config),
        'features': asdict(feature_config),
        'norm_stats': stats.to_dict(),
    }
    metadata.update(extra or {})
    return save_checkpoint(path, model.state_dict(), metadata)


def load_encoder(path) -> Tuple[EncoderModel, FeatureConfig, NormStats]:
    tensors, metadata = load_checkpoint(path)
    if metadata.get('kind') != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a room-encoder checkpoint (kind={metadata.get('kind')})")
    config = EncoderConfig(**metadata['encoder'])
    feature_config = FeatureConfig(**metadata['features'])
    stats = NormStats.from_dict(metadata['norm_stats'])
    model = EncoderModel(config)
    model.load_state_dict(tensors)
    return model, feature_config, stats


def embed_scene(scene: np.ndarray, model: EncoderModel, feature_config: FeatureConfig,
                stats: NormStats) -> np.ndarray:
    """Frozen-encoder embedding h of one 4-channel scene"""
    planes = normalize_planes(scene_planes(scene, feature_config), stats).astype(np.float32)
    return encoder_forward(planes, model, EVAL)
