"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL`` line; the lines are
repeated in the terminal summary. Run alone with::

    pytest tests/test_acceptance.py -v
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mnvae import pipeline as pl
from mnvae.cli import main
from mnvae.nodes import estimate_nodes, likelihood_curve
from mnvae.rpca import MaskConfig, RpcaConfig, apply_mask, hard_mask, mask_threshold, rpca, rpca_lambda, soft_mask
from mnvae.signal_io import AudioBuffer, StftConfig, analyze, istft, stft, synthesize, write_wav
from mnvae.synth import make_corpus
from mnvae.trainer import load_checkpoint
from mnvae.vae import ModelConfig, VaeModel, backward, forward
from mnvae.window import WindowConfig, detect_window, window_width
from test_nodes import blobs
from test_vae import finite_difference, rel_err
from test_window import analytic_trace


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


# ---------------------------------------------------------------- 1

def test_criterion_1_gradients():
    cfg = ModelConfig(input_dim=6, enc_hidden=5, dec_hidden=5, latent_dim=3, num_nodes=2, context_dim=4)
    t0 = time.time()
    worst = 0.0
    for seed in range(20):
        g = np.random.default_rng(seed)
        model = VaeModel.init(cfg, seed)
        model.params["init_h"][:] = 0.2 * g.standard_normal(5)
        model.params["init_c"][:] = 0.2 * g.standard_normal(5)
        x = np.abs(g.standard_normal((1, 4, 6)))
        noise = g.standard_normal((1, 4, 2, 3))
        w = float(g.uniform(0.0, 1.0))
        trace, _ = forward(model, x, noise, w)
        grads = backward(model, trace)
        fd = finite_difference(model, x, noise, w)
        worst = max(worst, max(rel_err(grads[k], fd[k]) for k in grads))
    dt = time.time() - t0
    ok = worst <= 1e-4 and dt < 60
    assert report(1, ok, f"max rel err {worst:.2e} over 20 seeds, {dt:.1f}s")


# ---------------------------------------------------------------- 2

def test_criterion_2_rpca():
    g = np.random.default_rng(0)
    u, v = np.abs(g.standard_normal(50)), np.abs(g.standard_normal(50))
    low = 10.0 * np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
    sparse = np.zeros((50, 50))
    sparse.flat[g.choice(2500, 5, replace=False)] = 25.0
    t0 = time.time()
    dec = rpca(low + sparse, RpcaConfig(lambda_scale=1.0))
    dt = time.time() - t0
    err = np.linalg.norm(dec.l - low) / np.linalg.norm(low)
    lam_ok = all(rpca_lambda((a, b), 0.3) == 0.3 / np.sqrt(max(a, b)) for a, b in [(512, 100), (64, 300), (50, 50)])
    ok = err <= 1e-3 and dec.iterations <= 500 and dt < 5 and lam_ok
    assert report(2, ok, f"rel err {err:.2e}, {dec.iterations} iters, {dt:.2f}s, lambda formula {lam_ok}")


# ---------------------------------------------------------------- 3

def test_criterion_3_mask():
    thr_err = abs(mask_threshold(1.0) - np.sqrt(0.5))
    half = soft_mask(np.array([[np.sqrt(0.5)]]), np.array([[1.0]]))[0, 0]
    g = np.random.default_rng(1)
    m = np.abs(g.standard_normal((60, 60)))
    w = soft_mask(g.random((60, 60)) * m, m)
    elementwise = np.array_equal(apply_mask(w, m), w * m)
    low = np.abs(g.standard_normal((80, 80)))
    sp = np.abs(g.standard_normal((80, 80))) * (g.random((80, 80)) < 0.4)
    mag = np.sqrt(low ** 2 + sp ** 2)
    off = np.abs(sp / mag - mask_threshold(1.0)) > 1e-3
    sharp = soft_mask(sp, mag, MaskConfig(1.0, 1e4))
    agree = float(np.mean(np.abs(sharp - hard_mask(sp, low, 1.0))[off] <= 1e-3))
    ok = thr_err <= 1e-12 and half == 0.5 and elementwise and agree >= 0.999
    assert report(3, ok, f"threshold err {thr_err:.1e}, W at threshold {half}, hard-mask agreement {agree:.4f}")


# ---------------------------------------------------------------- 4

def _structured(n=16000, sr=16000):
    t = np.arange(n) / sr
    impulses = np.zeros(n)
    impulses[::997] = 1.0
    chirp = np.sin(2 * np.pi * (100 * t + 2000 * t ** 2))
    square = np.sign(np.sin(2 * np.pi * 220 * t)) + 0.01
    step = np.where(t < 0.5, 0.2, -0.7)
    return [np.sin(2 * np.pi * 440 * t), impulses, chirp, square, step]


def test_criterion_4_stft():
    g = np.random.default_rng(2)
    signals = [g.standard_normal(int(g.integers(4000, 20000))) * g.uniform(0.01, 1) for _ in range(10)]
    signals += _structured()
    worst = 0.0
    for x in signals:
        y = synthesize(analyze(AudioBuffer(x))).samples
        worst = max(worst, np.linalg.norm(x - y) / np.linalg.norm(x))
    bins = stft(AudioBuffer(signals[0])).bins
    ok = worst <= 1e-6 and bins == 512 and StftConfig().bins == 512
    assert report(4, ok, f"max round-trip rel err {worst:.2e} on {len(signals)} signals, {bins} bins")


# ---------------------------------------------------------------- 5

def test_criterion_5_nodes():
    out = {}
    worst_t = 0.0
    for modes in (2, 4):
        x = blobs(modes, 11)
        runs = []
        for _ in range(2):
            t0 = time.time()
            runs.append(estimate_nodes(likelihood_curve(x, range(1, 7), seed=0)))
            worst_t = max(worst_t, time.time() - t0)
        out[modes] = runs
    det = all(a == b for a, b in out.values())
    k2, k4 = out[2][0].nodes, out[4][0].nodes
    ok = k2 == 1 and k4 == 3 and det and worst_t < 30
    assert report(5, ok, f"2-mode K={k2}, 4-mode K={k4}, deterministic {det}, slowest {worst_t:.1f}s")


# ---------------------------------------------------------------- 6

def test_criterion_6_window(tmp_path):
    win = detect_window(analytic_trace(), WindowConfig())
    default_ok = WindowConfig() == WindowConfig(250.0, 60.0)
    write_wav(make_corpus(1, 5, duration=0.3)[0].mixture, tmp_path / "a.wav")
    (tmp_path / "c.json").write_text('{"window": {"mse_threshold": 1e-9, "kl_threshold": 1e-9}}')
    code = main(["train", str(tmp_path / "a.wav"), "-o", str(tmp_path / "t"), "--profile", "desk",
                 "--config", str(tmp_path / "c.json"), "--epochs", "1"])
    ok = win.spans == [(12, 49)] and win.selected_epoch == 30 and code == 2 and default_ok
    assert report(6, ok, f"spans {win.spans}, selected {win.selected_epoch}, empty-window exit code {code}")


# ---------------------------------------------------------------- 7

def _write_corpus(clips, d):
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, c in enumerate(clips):
        write_wav(c.mixture, d / f"mix_{i:03d}.wav")
        write_wav(c.speech, d / f"speech_{i:03d}.wav")
        paths.append((d / f"mix_{i:03d}.wav", d / f"speech_{i:03d}.wav"))
    return paths


def train_corpus(seed=1, speakers=(1,)):
    # four one-second clips, about 2000 frames; half carry faint music
    return make_corpus(4, seed, speakers=speakers, music_fraction=0.5, snr_db=15.0)


@pytest.mark.slow
def test_criterion_7_end_to_end(tmp_path):
    t0 = time.time()
    train_files = [m for m, _ in _write_corpus(train_corpus(), tmp_path / "train")]
    test_pairs = _write_corpus(make_corpus(10, 777, speakers=(1,), music_fraction=1.0, snr_db=0.0), tmp_path / "test")

    cfg = pl.desk_profile(1)
    res = pl.cmd_train(cfg, train_files, tmp_path / "vae")
    vae_gain = float("nan")
    if res.selected_path is not None:
        vae_gain = pl.cmd_evaluate(cfg, res.selected_path, test_pairs, tmp_path / "vae.csv").mean_improvement

    ae_cfg = cfg.replace(train={"kl_weight_start": 0.0, "kl_weight_end": 0.0})
    ae = pl.cmd_train(ae_cfg, train_files, tmp_path / "ae")
    ae_gain = pl.cmd_evaluate(ae_cfg, ae.checkpoint_paths[-1], test_pairs, tmp_path / "ae.csv").mean_improvement
    dt = time.time() - t0
    ok = vae_gain >= 3.0 and ae_gain < 1.0 and dt < 20 * 60
    assert report(7, ok, f"VAE+RPCA improvement {vae_gain:.2f} dB (need >= 3, window {res.window.spans} "
                         f"selected {res.window.selected_epoch}); autoencoder {ae_gain:.2f} dB (need < 1); {dt:.0f}s")


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_8_window_vs_nodes(tmp_path):
    files = [m for m, _ in _write_corpus(train_corpus(seed=2, speakers=(0, 1, 2)), tmp_path / "data")]
    widths = {1: [], 3: []}
    for k in widths:
        for seed in range(5):
            cfg = pl.desk_profile(k).replace(train={"seed": seed})
            res = pl.cmd_train(cfg, files, tmp_path / f"k{k}_s{seed}")
            widths[k].append(window_width(res.window))
    m1, m3 = np.mean(widths[1]), np.mean(widths[3])
    ok = m3 >= m1
    assert report(8, ok, f"mean window width K=3 {m3:.1f} vs K=1 {m1:.1f} (per seed {widths[3]} vs {widths[1]})")


# ---------------------------------------------------------------- 9

def test_criterion_9_determinism(tmp_path):
    files = [m for m, _ in _write_corpus(make_corpus(2, 4, duration=0.4, speakers=(1,)), tmp_path / "d")]
    cfg = pl.desk_profile(2).replace(train={"epochs": 3, "segment_frames": 50, "seed": 9})
    blobs_ = []
    for run in ("a", "b"):
        out = tmp_path / run
        pl.cmd_train(cfg, files, out)
        pl.cmd_separate(cfg, out / pl.checkpoint_name(2), files[0], out / "sep.wav", dump_dir=out / "dump")
        blobs_.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    same = blobs_[0] == blobs_[1]
    kinds = sorted({Path(k).suffix for k in blobs_[0]})
    assert report(9, same, f"{len(blobs_[0])} artifacts byte-identical across runs ({', '.join(kinds)})")
