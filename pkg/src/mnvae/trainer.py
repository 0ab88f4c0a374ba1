"""Adam training with an exponentially annealed KL weight, plus checkpoints."""

from __future__ import annotations

import csv
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .vae import ModelConfig, VaeModel, backward, forward, param_shapes

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MNVAE001"
_HEADER = struct.Struct("<8s6iqB")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kl_weight_start: float = 1e-4
    kl_weight_end: float = 1.0
    batch_size: int = 16
    segment_frames: int = 100
    clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.segment_frames < 1:
            raise ValueError("batch_size and segment_frames must be >= 1")
        # both zero is the plain-autoencoder ablation
        if not (self.kl_weight_start == self.kl_weight_end == 0.0):
            if not 0 < self.kl_weight_start <= self.kl_weight_end:
                raise ValueError("need 0 < kl_weight_start <= kl_weight_end (or both 0)")


def anneal_weight(epoch: int, cfg: TrainConfig) -> float:
    """Geometric interpolation from ``kl_weight_start`` to ``kl_weight_end``.

    Every latent node shares this weight.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    a, b = cfg.kl_weight_start, cfg.kl_weight_end
    if a == b or cfg.epochs == 1:
        return float(a)
    return float(a * (b / a) ** (epoch / (cfg.epochs - 1)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, model: VaeModel) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in model.params.items()},
                   {n: np.zeros_like(p) for n, p in model.params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameters")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        gr = grads[name]
        if gr.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {gr.shape} != parameter shape {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * gr
        v *= beta2
        v += (1.0 - beta2) * gr * gr
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class LossRecord:
    epoch: int
    mse: float
    kl: float
    kl_weight: float

    @property
    def total(self) -> float:
        return self.mse + self.kl_weight * self.kl


@dataclass
class LossTrace:
    records: list[LossRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def mse(self) -> np.ndarray:
        return np.array([r.mse for r in self.records])

    @property
    def kl(self) -> np.ndarray:
        return np.array([r.kl for r in self.records])

    @classmethod
    def from_arrays(cls, mse, kl, kl_weight=None) -> "LossTrace":
        kl_weight = np.zeros(len(mse)) if kl_weight is None else kl_weight
        return cls([LossRecord(i, float(a), float(b), float(w)) for i, (a, b, w) in enumerate(zip(mse, kl, kl_weight))])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "mse", "kl", "kl_weight"])
            for r in self.records:
                wr.writerow([r.epoch, repr(float(r.mse)), repr(float(r.kl)), repr(float(r.kl_weight))])

    @classmethod
    def from_csv(cls, path) -> "LossTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([LossRecord(int(r["epoch"]), float(r["mse"]), float(r["kl"]), float(r["kl_weight"])) for r in rows])


def make_segments(specs, segment_frames: int):
    """Cut magnitude matrices into fixed-length, zero-padded segments.

    Returns ``(segments [N, T, D], mask [N, T])``.
    """
    segs, masks = [], []
    for mag in specs:
        mag = np.asarray(getattr(mag, "mag", mag), dtype=np.float64)
        for start in range(0, mag.shape[0], segment_frames):
            chunk = mag[start:start + segment_frames]
            n = chunk.shape[0]
            seg = np.zeros((segment_frames, mag.shape[1]))
            seg[:n] = chunk
            mk = np.zeros(segment_frames)
            mk[:n] = 1.0
            segs.append(seg)
            masks.append(mk)
    if not segs:
        raise TrainingError("no training frames")
    return np.stack(segs), np.stack(masks)


def train(model: VaeModel, data, cfg: TrainConfig, keep_checkpoints: bool = True,
          on_epoch=None):
    """Train in place. Returns ``(checkpoints, trace)``.

    ``checkpoints[e]`` is a copy of the model after epoch ``e`` (empty when
    ``keep_checkpoints`` is false). ``on_epoch(epoch, model, state, record)`` is
    called after each epoch. Recorded losses are frame-weighted means over the
    epoch's batches.
    """
    data = list(data)
    if not data:
        raise TrainingError("empty dataset")
    segs, masks = make_segments(data, cfg.segment_frames)
    if segs.shape[-1] != model.cfg.input_dim:
        raise TrainingError(f"data has {segs.shape[-1]} bins, model expects {model.cfg.input_dim}")
    gen = np.random.Generator(np.random.PCG64(cfg.seed))
    state = AdamState.zeros_like(model)
    trace = LossTrace()
    checkpoints = []
    K, Z = model.cfg.num_nodes, model.cfg.latent_dim

    for epoch in range(cfg.epochs):
        w = anneal_weight(epoch, cfg)
        order = gen.permutation(segs.shape[0])
        mse_acc = kl_acc = frames = 0.0
        for start in range(0, order.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, mk = segs[idx], masks[idx]
            noise = gen.standard_normal((x.shape[0], x.shape[1], K, Z))
            tr, (total, mse, kl) = forward(model, x, noise, w, mk)
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch} (mse={mse}, kl={kl}, weight={w})")
            grads = backward(model, tr)
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            n = mk.sum()
            mse_acc += mse * n
            kl_acc += kl * n
            frames += n
        rec = LossRecord(epoch, mse_acc / frames, kl_acc / frames, w)
        trace.records.append(rec)
        log.info("epoch %d  mse %.4f  kl %.4f  weight %.3g", epoch, rec.mse, rec.kl, w)
        if keep_checkpoints:
            checkpoints.append(model.copy())
        if on_epoch is not None:
            on_epoch(epoch, model, state, rec)
    return checkpoints, trace


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: VaeModel, state: AdamState | None, path) -> None:
    """Binary checkpoint, written atomically.

    Layout: magic ``MNVAE001``; six int32 config values (input_dim, enc_hidden,
    dec_hidden, latent_dim, num_nodes, context_dim); int64 Adam step; uint8
    flag for optimizer moments; then every parameter as little-endian float32
    in ``param_shapes`` order, followed by the first and second moments in the
    same order when the flag is set.
    """
    path = os.fspath(path)
    has_state = state is not None
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, *model.cfg.as_tuple(), state.step if has_state else 0, int(has_state))]
    order = list(param_shapes(model.cfg))
    tensors = [model.params[n] for n in order]
    if has_state:
        tensors += [state.m[n] for n in order] + [state.v[n] for n in order]
    parts += [np.ascontiguousarray(t, dtype="<f4").tobytes() for t in tensors]
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[VaeModel, AdamState | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, *dims, step, has_state = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    try:
        cfg = ModelConfig(*dims)
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid config block {dims}") from exc
    if expected is not None and cfg != expected:
        raise CheckpointError(f"{path}: checkpoint config {cfg} does not match expected {expected}")
    shapes = param_shapes(cfg)
    n_floats = sum(int(np.prod(s)) for s in shapes.values()) * (3 if has_state else 1)
    if len(blob) != _HEADER.size + 4 * n_floats:
        raise CheckpointError(f"{path}: expected {_HEADER.size + 4 * n_floats} bytes, found {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64)

    def take(offset):
        out = {}
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            out[name] = flat[offset:offset + size].reshape(shape).copy()
            offset += size
        return out, offset

    params, off = take(0)
    state = None
    if has_state:
        m, off = take(off)
        v, off = take(off)
        state = AdamState(m, v, int(step))
    return VaeModel(cfg, params), state
