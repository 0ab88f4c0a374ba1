"""WAV input/output and short-time Fourier analysis.

The default analysis uses a 1024-point periodic Hann window with a hop of
256 samples at 16 kHz. The one-sided spectrum of a 1024-point DFT has 513
bins; the Nyquist bin is split off from the magnitude/phase matrices so the
model sees exactly 512 bins. It is kept on the side (``Spectrogram.nyquist``)
so that an unmodified spectrogram still inverts exactly. Spectrograms built
from processed magnitudes carry ``nyquist=None``, which resynthesizes that bin
as zero.
"""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_SAMPLE_RATE = 16000
PEAK_LEVEL = 0.95

SPEC_MAGIC = b"SPEC0001"


class AudioError(ValueError):
    """Raised for unreadable, unsupported or degenerate audio."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("audio samples must be finite")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        n = self.fft_size
        if n < 4 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two >= 4, got {n}")
        if not 0 < self.hop <= n:
            raise ValueError(f"hop must be in (0, fft_size], got {self.hop}")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}; choose from {sorted(_WINDOWS)}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2

    def window_array(self) -> np.ndarray:
        return _WINDOWS[self.window](self.fft_size)

    def is_cola(self) -> bool:
        """True when the summed squared window is constant across hops.

        This is the condition under which weighted overlap-add with
        window-square normalization inverts the transform exactly.
        """
        w2 = self.window_array() ** 2
        acc = np.zeros(self.hop)
        for start in range(0, self.fft_size, self.hop):
            seg = w2[start:start + self.hop]
            acc[: seg.shape[0]] += seg
        return bool(acc.min() > 0 and np.ptp(acc) <= 1e-10 * acc.max())

    def overlap_gain(self) -> float:
        """Steady-state sum of squared windows overlapping any one sample."""
        w2 = self.window_array() ** 2
        return float(sum(w2[start::self.hop].sum() for start in range(self.hop)) / self.hop)

    @property
    def edge(self) -> int:
        """Samples at each end that lack full overlap."""
        return self.fft_size - self.hop


def _hann(n):
    # periodic Hann, the DFT-even variant that is COLA at hop n/4
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _sqrt_hann(n):
    return np.sqrt(_hann(n))


def _rect(n):
    return np.ones(n)


_WINDOWS = {"hann": _hann, "sqrt_hann": _sqrt_hann, "rect": _rect}


@dataclass
class Spectrogram:
    """Magnitude and phase, each ``[frames, bins]``."""

    mag: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    nyquist: np.ndarray | None = None
    length: int | None = None

    def __post_init__(self):
        self.mag = np.asarray(self.mag, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.mag.ndim != 2 or self.mag.shape != self.phase.shape:
            raise ValueError(f"mag {self.mag.shape} and phase {self.phase.shape} must be equal 2-D shapes")
        if self.mag.shape[1] != self.config.bins:
            raise ValueError(f"expected {self.config.bins} bins, got {self.mag.shape[1]}")
        if not np.all(np.isfinite(self.mag)) or np.any(self.mag < 0):
            raise ValueError("magnitudes must be finite and nonnegative")
        if self.nyquist is not None:
            self.nyquist = np.asarray(self.nyquist, dtype=np.float64).reshape(-1)
            if self.nyquist.shape[0] != self.mag.shape[0]:
                raise ValueError("nyquist column length must equal frame count")

    @property
    def frames(self) -> int:
        return self.mag.shape[0]

    @property
    def bins(self) -> int:
        return self.mag.shape[1]

    def with_mag(self, mag: np.ndarray) -> "Spectrogram":
        """Same phase and framing, new magnitudes; the Nyquist bin is dropped."""
        return replace(self, mag=np.asarray(mag, dtype=np.float64), nyquist=None)


# ---------------------------------------------------------------- WAV files

def read_wav(path) -> AudioBuffer:
    """Read a PCM WAV file as mono floats in [-1, 1].

    Integer samples are scaled by ``1 / 2**(bits-1)`` (8-bit files are
    unsigned and offset first). Multichannel audio is averaged.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    try:
        with wave.open(path, "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioError(f"{path}: not a readable PCM WAV file ({exc})") from exc

    if width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        data = v.astype(np.float64) / float(1 << 23)
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise AudioError(f"{path}: unsupported sample width {width}")

    if data.size == 0:
        raise AudioError(f"{path}: zero-length audio")
    data = data.reshape(-1, channels).mean(axis=1)
    return AudioBuffer(data, rate)


def write_wav(buf: AudioBuffer, path) -> None:
    """Write 16-bit PCM mono. Samples are clamped to [-1, 1] first."""
    if len(buf) == 0:
        raise AudioError("refusing to write an empty buffer")
    q = np.clip(np.round(np.clip(buf.samples, -1.0, 1.0) * 32768.0), -32768, 32767)
    with wave.open(os.fspath(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(buf.sample_rate)
        w.writeframes(q.astype("<i2").tobytes())


def peak_normalize(buf: AudioBuffer, level: float = PEAK_LEVEL) -> tuple[AudioBuffer, float]:
    """Scale so that ``max |x| == level``. Returns the buffer and the gain applied."""
    peak = float(np.max(np.abs(buf.samples))) if len(buf) else 0.0
    if peak == 0.0:
        return AudioBuffer(buf.samples.copy(), buf.sample_rate), 1.0
    gain = level / peak
    return AudioBuffer(buf.samples * gain, buf.sample_rate), gain


# ---------------------------------------------------------------- STFT

def num_frames(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.fft_size:
        return 0
    return 1 + (n_samples - cfg.fft_size) // cfg.hop


def stft(buf: AudioBuffer, cfg: StftConfig | None = None) -> Spectrogram:
    """Windowed one-sided DFT of consecutive frames.

    Frame ``t`` covers samples ``[t*hop, t*hop + fft_size)``; a trailing
    partial frame is not analysed.
    """
    cfg = cfg or StftConfig()
    x = buf.samples
    n_frames = num_frames(x.shape[0], cfg)
    if n_frames == 0:
        raise AudioError(f"audio of {x.shape[0]} samples is shorter than one frame ({cfg.fft_size})")
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(x[idx] * cfg.window_array()[None, :], axis=1)
    nyq = spec[:, -1].real
    spec = spec[:, :-1]
    return Spectrogram(np.abs(spec), np.angle(spec), cfg, buf.sample_rate, nyq, x.shape[0])


def istft(spec: Spectrogram, length: int | None = None) -> AudioBuffer:
    """Weighted overlap-add resynthesis with window-square normalization.

    ``length`` defaults to the analysed signal length when known; samples past
    the last frame are zero.
    """
    cfg = spec.config
    if not cfg.is_cola():
        raise ValueError(f"window {cfg.window!r} at hop {cfg.hop} does not satisfy overlap-add")
    n_frames = spec.frames
    full = np.zeros((n_frames, cfg.bins + 1), dtype=np.complex128)
    full[:, :-1] = spec.mag * np.exp(1j * spec.phase)
    if spec.nyquist is not None:
        full[:, -1] = spec.nyquist
    frames = np.fft.irfft(full, n=cfg.fft_size, axis=1)

    w = cfg.window_array()
    out_len = (n_frames - 1) * cfg.hop + cfg.fft_size
    y = np.zeros(out_len)
    norm = np.zeros(out_len)
    w2 = w * w
    for t in range(n_frames):
        s = t * cfg.hop
        y[s:s + cfg.fft_size] += frames[t] * w
        norm[s:s + cfg.fft_size] += w2
    # near the ends only part of the overlap exists; flooring the normalizer at
    # its steady-state value fades those samples instead of amplifying them
    y /= np.maximum(norm, cfg.overlap_gain())

    if length is None:
        length = spec.length if spec.length is not None else out_len
    if length > out_len:
        y = np.concatenate([y, np.zeros(length - out_len)])
    return AudioBuffer(y[:length], spec.sample_rate)


# ---------------------------------------------------------------- binary dumps

def save_matrix(path, mat: np.ndarray) -> None:
    """Write ``SPEC0001`` + rows, cols (uint32 LE) + float32 LE row-major data."""
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise ValueError("only 2-D matrices can be dumped")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(SPEC_MAGIC)
        fh.write(struct.pack("<II", *mat.shape))
        fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != SPEC_MAGIC:
        raise ValueError(f"{path}: not a spectrogram dump")
    rows, cols = struct.unpack("<II", blob[8:16])
    if len(blob) != 16 + 4 * rows * cols:
        raise ValueError(f"{path}: truncated dump ({len(blob)} bytes for {rows}x{cols})")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(rows, cols).astype(np.float64)


def analyze(buf: AudioBuffer, cfg: StftConfig | None = None) -> Spectrogram:
    """STFT of ``buf`` zero-padded by ``cfg.edge`` samples at both ends.

    Every original sample then has full window overlap, so ``synthesize``
    recovers the whole signal, not only its interior. The end pad also
    rounds the length up to a whole number of hops.
    """
    cfg = cfg or StftConfig()
    n = len(buf)
    tail = cfg.edge + (-(n + cfg.edge) % cfg.hop)
    padded = np.concatenate([np.zeros(cfg.edge), buf.samples, np.zeros(tail)])
    spec = stft(AudioBuffer(padded, buf.sample_rate), cfg)
    spec.length = n
    return spec


def synthesize(spec: Spectrogram, length: int | None = None) -> AudioBuffer:
    """Inverse of ``analyze``: overlap-add, then strip the padding."""
    length = spec.length if length is None else length
    full = istft(replace(spec, length=None))
    start = spec.config.edge
    out = full.samples[start:start + length]
    if out.shape[0] < length:
        out = np.concatenate([out, np.zeros(length - out.shape[0])])
    return AudioBuffer(out, spec.sample_rate)
