"""End-to-end commands: train, analyze, separate, evaluate, synth-data.

Each command takes a ``PipelineConfig`` and plain file paths, writes its
artifacts, and returns a small result object. ``mnvae.cli`` wraps them.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nodes, synth
from .metrics import si_sdr
from .rpca import MaskConfig, RpcaConfig, apply_mask, rpca, soft_mask
from .signal_io import (
    DEFAULT_SAMPLE_RATE, AudioBuffer, AudioError, StftConfig, analyze, peak_normalize, read_wav,
    save_matrix, synthesize, write_wav,
)
from .trainer import LossTrace, TrainConfig, load_checkpoint, save_checkpoint, train
from .vae import ModelConfig, VaeModel, reconstruct
from .window import WindowConfig, detect_window, write_window_csv

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_EMPTY_WINDOW = 0, 1, 2


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    rpca: RpcaConfig = field(default_factory=RpcaConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    profile: str = "full"
    data_dir: str | None = None
    checkpoint_dir: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.model.input_dim != self.stft.bins:
            raise ValueError(f"model input_dim {self.model.input_dim} != STFT bins {self.stft.bins}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        base = cls()
        kw = {}
        for f in dataclasses.fields(cls):
            cur = getattr(base, f.name)
            val = d.get(f.name, cur)
            if dataclasses.is_dataclass(cur) and isinstance(val, dict):
                val = dataclasses.replace(cur, **val)
            kw[f.name] = val
        return cls(**kw)

    def replace(self, **sections) -> "PipelineConfig":
        """Override fields section-wise, e.g. ``replace(model={"num_nodes": 3})``."""
        d = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict) and isinstance(d.get(key), dict):
                d[key].update(val)
            else:
                d[key] = val
        return PipelineConfig.from_dict(d)


def full_profile(num_nodes: int = 1) -> PipelineConfig:
    return PipelineConfig(model=ModelConfig(num_nodes=num_nodes), profile="full")


# desk scale: 64 bins from a 128-point frame and a small network
DESK = {
    "stft": {"fft_size": 128, "hop": 32, "window": "hann"},
    "model": {"input_dim": 64, "enc_hidden": 64, "dec_hidden": 64, "latent_dim": 16, "context_dim": 16},
    "train": {"batch_size": 8},
    "mask": {"gain": 0.5},
}


def desk_profile(num_nodes: int = 1) -> PipelineConfig:
    d = PipelineConfig().to_dict()
    for section, vals in DESK.items():
        d[section].update(vals)
    d["model"]["num_nodes"] = num_nodes
    d["window"] = dataclasses.asdict(WindowConfig().scaled_for_bins(DESK["model"]["input_dim"]))
    d["profile"] = "desk"
    return PipelineConfig.from_dict(d)


PROFILES = {"full": full_profile, "desk": desk_profile}


def load_config(path=None, profile: str = "full", num_nodes: int | None = None) -> PipelineConfig:
    cfg = PROFILES[profile]()
    if path is not None:
        with open(path) as fh:
            cfg = cfg.replace(**json.load(fh))
    if num_nodes is not None:
        cfg = cfg.replace(model={"num_nodes": num_nodes})
    return cfg


# ---------------------------------------------------------------- audio helpers

def load_audio(path) -> tuple[AudioBuffer, float]:
    """Read a WAV and peak-normalize it. Returns the buffer and the gain applied."""
    buf = read_wav(path)
    if buf.sample_rate != DEFAULT_SAMPLE_RATE:
        raise AudioError(f"{path}: expected {DEFAULT_SAMPLE_RATE} Hz audio, got {buf.sample_rate} Hz")
    return peak_normalize(buf)


def list_wavs(paths) -> list[Path]:
    """Expand directories into their sorted ``*.wav`` files."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob("*.wav")))
        elif p.exists():
            out.append(p)
        else:
            raise PipelineError(f"no such file or directory: {p}")
    if not out:
        raise PipelineError("no input WAV files found")
    return out


def spectrograms(paths, cfg: PipelineConfig):
    specs = []
    for p in list_wavs(paths):
        buf, _ = load_audio(p)
        specs.append(analyze(buf, cfg.stft))
    return specs


# ---------------------------------------------------------------- train

@dataclass
class TrainResult:
    trace: LossTrace
    window: object
    checkpoint_paths: list[Path]
    selected_path: Path | None

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.selected_path is not None else EXIT_EMPTY_WINDOW


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.ckpt"


def cmd_train(cfg: PipelineConfig, inputs, out_dir, init_seed: int | None = None) -> TrainResult:
    """Train on WAVs, write per-epoch checkpoints, ``losses.csv`` and ``window.csv``.

    The checkpoint at the selected epoch is also copied to ``selected.ckpt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = spectrograms(inputs, cfg)
    model = VaeModel.init(cfg.model, cfg.train.seed if init_seed is None else init_seed)
    paths = []

    def on_epoch(epoch, m, state, rec):
        p = out / checkpoint_name(epoch)
        save_checkpoint(m, state, p)
        paths.append(p)

    _, trace = train(model, specs, cfg.train, keep_checkpoints=False, on_epoch=on_epoch)
    trace.to_csv(out / "losses.csv")
    win = detect_window(trace, cfg.window)
    write_window_csv(win, out / "window.csv", cfg.window)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    selected = None
    if win.selected_epoch is not None:
        selected = out / "selected.ckpt"
        shutil.copyfile(paths[win.selected_epoch], selected)
        log.info("separation window %s, selected epoch %d", win.spans, win.selected_epoch)
    else:
        log.warning("no separation window under thresholds mse<=%g kl<=%g",
                    cfg.window.mse_threshold, cfg.window.kl_threshold)
    return TrainResult(trace, win, paths, selected)


# ---------------------------------------------------------------- analyze

def cmd_analyze(cfg: PipelineConfig, inputs, out_dir, k_max: int = 8, seed: int = 0,
                gain_ratio_threshold: float = 0.1) -> nodes.NodeEstimate:
    """PCA density, GMM likelihood curve and the recommended node count."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats = nodes.frame_features(spectrograms(inputs, cfg))
    curve = nodes.likelihood_curve(feats, range(1, k_max + 1), seed=seed)
    est = nodes.estimate_nodes(curve, gain_ratio_threshold)
    curve.to_csv(out / "curve.csv")
    nodes.write_density_csv(nodes.density_grid(feats), out / "density.csv")
    with open(out / "nodes.json", "w") as fh:
        json.dump({"clusters": est.clusters, "nodes": est.nodes, "nodes_safe": est.nodes_safe}, fh)
    return est


# ---------------------------------------------------------------- separate

@dataclass
class Separation:
    audio: AudioBuffer
    mixture_mag: np.ndarray
    vae_mag: np.ndarray
    mask: np.ndarray
    speech_mag: np.ndarray


def separate_buffer(model: VaeModel | None, buf: AudioBuffer, cfg: PipelineConfig,
                    bypass_vae: bool = False, mask_ones: bool = False) -> Separation:
    """VAE reconstruction, RPCA soft mask, resynthesis with the mixture phase."""
    normed, gain = peak_normalize(buf)
    spec = analyze(normed, cfg.stft)
    if bypass_vae:
        vae_mag = spec.mag
    else:
        if model is None:
            raise PipelineError("a model is required unless the VAE is bypassed")
        vae_mag = np.maximum(reconstruct(model, spec.mag), 0.0)
    if mask_ones:
        w = np.ones_like(vae_mag)
    else:
        dec = rpca(vae_mag, cfg.rpca)
        w = soft_mask(dec.s, vae_mag, cfg.mask)
    speech = apply_mask(w, vae_mag)
    out_spec = spec.with_mag(speech)
    if bypass_vae and mask_ones:
        out_spec.nyquist = spec.nyquist
    y = synthesize(out_spec).samples / gain
    return Separation(AudioBuffer(np.clip(y, -1.0, 1.0), buf.sample_rate), spec.mag, vae_mag, w, speech)


def cmd_separate(cfg: PipelineConfig, checkpoint, in_wav, out_wav, dump_dir=None,
                 bypass_vae: bool = False, mask_ones: bool = False) -> Separation:
    model = None
    if not bypass_vae:
        model, _ = load_checkpoint(checkpoint, expected=cfg.model)
    buf = read_wav(in_wav)
    if buf.sample_rate != DEFAULT_SAMPLE_RATE:
        raise AudioError(f"{in_wav}: expected {DEFAULT_SAMPLE_RATE} Hz audio")
    sep = separate_buffer(model, buf, cfg, bypass_vae, mask_ones)
    write_wav(sep.audio, out_wav)
    if dump_dir is not None:
        d = Path(dump_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("mixture_mag", "vae_mag", "mask", "speech_mag"):
            save_matrix(d / f"{name}.spec", getattr(sep, name))
    return sep


# ---------------------------------------------------------------- evaluate

@dataclass
class EvalRow:
    name: str
    sdr_mixture: float
    sdr_separated: float

    @property
    def improvement(self) -> float:
        return self.sdr_separated - self.sdr_mixture


@dataclass
class EvalReport:
    rows: list[EvalRow]

    @property
    def mean_mixture(self) -> float:
        return float(np.mean([r.sdr_mixture for r in self.rows]))

    @property
    def mean_separated(self) -> float:
        return float(np.mean([r.sdr_separated for r in self.rows]))

    @property
    def mean_improvement(self) -> float:
        return float(np.mean([r.improvement for r in self.rows]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["file", "si_sdr_mixture", "si_sdr_separated", "improvement"])
            for r in self.rows:
                wr.writerow([r.name, f"{r.sdr_mixture:.4f}", f"{r.sdr_separated:.4f}", f"{r.improvement:.4f}"])
            wr.writerow(["MEAN", f"{self.mean_mixture:.4f}", f"{self.mean_separated:.4f}",
                         f"{self.mean_improvement:.4f}"])


def evaluate_buffers(model, pairs, cfg: PipelineConfig, names=None, **sep_kw) -> EvalReport:
    rows = []
    for i, (mixture, reference) in enumerate(pairs):
        if len(mixture) != len(reference):
            raise PipelineError(f"pair {i}: mixture has {len(mixture)} samples, reference {len(reference)}")
        sep = separate_buffer(model, mixture, cfg, **sep_kw)
        name = names[i] if names else str(i)
        rows.append(EvalRow(name, si_sdr(reference, mixture), si_sdr(reference, sep.audio)))
    return EvalReport(rows)


def cmd_evaluate(cfg: PipelineConfig, checkpoint, pairs, out_csv, **sep_kw) -> EvalReport:
    """SI-SDR of each mixture and of its separation against the clean reference."""
    model = None if sep_kw.get("bypass_vae") else load_checkpoint(checkpoint, expected=cfg.model)[0]
    bufs, names = [], []
    for mix_path, ref_path in pairs:
        bufs.append((read_wav(mix_path), read_wav(ref_path)))
        names.append(Path(mix_path).name)
    report = evaluate_buffers(model, bufs, cfg, names, **sep_kw)
    report.to_csv(out_csv)
    return report


# ---------------------------------------------------------------- synthetic data

def cmd_synth_data(out_dir, n_clips: int = 10, seed: int = 0, duration: float = 1.0,
                   speakers=(0,), music_fraction: float = 0.5, snr_db: float = 0.0) -> list[Path]:
    """Write ``mix_XXX.wav`` (plus ``speech_XXX.wav`` references) to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = synth.make_corpus(n_clips, seed, duration, speakers, music_fraction, snr_db)
    paths = []
    for i, clip in enumerate(clips):
        p = out / f"mix_{i:03d}.wav"
        write_wav(clip.mixture, p)
        write_wav(clip.speech, out / f"speech_{i:03d}.wav")
        paths.append(p)
    return paths


def checkpoint_for_epoch(train_dir, epoch: int) -> Path:
    return Path(train_dir) / checkpoint_name(epoch)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
