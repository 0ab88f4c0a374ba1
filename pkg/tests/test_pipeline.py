import json

import numpy as np
import pytest

from mnvae import pipeline as pl
from mnvae.cli import main
from mnvae.signal_io import AudioBuffer, load_matrix, read_wav, write_wav
from mnvae.trainer import LossTrace


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    pl.cmd_synth_data(d, n_clips=2, seed=3, duration=0.3, speakers=(1,), music_fraction=0.5, snr_db=0.0)
    return d


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = pl.desk_profile().replace(train={"epochs": 3, "segment_frames": 40})
    return cfg, pl.cmd_train(cfg, [corpus / "mix_000.wav", corpus / "mix_001.wav"], out), out


def test_profiles():
    full = pl.full_profile()
    assert full.stft.bins == 512 and full.model.input_dim == 512 and full.window.mse_threshold == 250
    desk = pl.desk_profile(3)
    assert desk.stft.bins == 64 and desk.model.num_nodes == 3
    assert desk.window.mse_threshold == 31.25 and desk.window.kl_threshold == 60


def test_config_json_round_trip(tmp_path):
    cfg = pl.desk_profile(2)
    (tmp_path / "c.json").write_text(json.dumps({"rpca": {"lambda_scale": 0.5}}))
    loaded = pl.load_config(tmp_path / "c.json", "desk", num_nodes=2)
    assert loaded.rpca.lambda_scale == 0.5 and loaded.model == cfg.model
    assert pl.PipelineConfig.from_dict(cfg.to_dict()) == cfg


def test_inconsistent_dims():
    with pytest.raises(ValueError):
        pl.full_profile().replace(model={"input_dim": 64})


def test_train_artifacts(trained):
    cfg, res, out = trained
    assert len(res.checkpoint_paths) == 3
    assert (out / "losses.csv").exists() and (out / "window.csv").exists()
    assert len(LossTrace.from_csv(out / "losses.csv")) == 3
    assert res.exit_code in (pl.EXIT_OK, pl.EXIT_EMPTY_WINDOW)


def test_separate_length_and_range(trained, corpus, tmp_path):
    cfg, res, out = trained
    sep = pl.cmd_separate(cfg, res.checkpoint_paths[-1], corpus / "mix_000.wav", tmp_path / "o.wav",
                          dump_dir=tmp_path / "dump")
    x = read_wav(corpus / "mix_000.wav")
    y = read_wav(tmp_path / "o.wav")
    assert len(y) == len(x)
    assert np.max(np.abs(sep.audio.samples)) <= 1.0
    assert np.all((sep.mask >= 0) & (sep.mask <= 1))
    assert load_matrix(tmp_path / "dump" / "mask.spec").shape == sep.mask.shape


def test_bypass_identity(corpus, tmp_path):
    cfg = pl.desk_profile()
    x = read_wav(corpus / "mix_001.wav")
    sep = pl.cmd_separate(cfg, None, corpus / "mix_001.wav", tmp_path / "id.wav", bypass_vae=True, mask_ones=True)
    assert np.linalg.norm(sep.audio.samples - x.samples) <= 1e-6 * np.linalg.norm(x.samples)


def test_checkpoint_mismatch(trained, corpus, tmp_path):
    cfg, res, _ = trained
    with pytest.raises(ValueError):
        pl.cmd_separate(cfg.replace(model={"num_nodes": 2}), res.checkpoint_paths[0],
                        corpus / "mix_000.wav", tmp_path / "x.wav")


def test_evaluate(trained, corpus, tmp_path):
    cfg, res, _ = trained
    pairs = [(corpus / "mix_000.wav", corpus / "speech_000.wav")]
    rep = pl.cmd_evaluate(cfg, res.checkpoint_paths[-1], pairs, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "file,si_sdr_mixture,si_sdr_separated,improvement"
    assert lines[-1].startswith("MEAN") and len(rep.rows) == 1


def test_evaluate_length_mismatch():
    a = AudioBuffer(np.ones(100))
    with pytest.raises(pl.PipelineError):
        pl.evaluate_buffers(None, [(a, AudioBuffer(np.ones(90)))], pl.desk_profile(), bypass_vae=True)


def test_analyze_single_speaker(tmp_path):
    d = tmp_path / "spk"
    pl.cmd_synth_data(d, n_clips=4, seed=3, speakers=(0,), music_fraction=0.0)
    est = pl.cmd_analyze(pl.desk_profile(), [d / f"mix_{i:03d}.wav" for i in range(4)], tmp_path / "an", k_max=5)
    assert est.nodes == 1
    assert (tmp_path / "an" / "curve.csv").exists() and (tmp_path / "an" / "density.csv").exists()


def test_empty_directory(tmp_path):
    with pytest.raises(pl.PipelineError):
        pl.cmd_analyze(pl.desk_profile(), [tmp_path], tmp_path / "out")


def test_wrong_sample_rate(tmp_path):
    write_wav(AudioBuffer(np.zeros(800) + 0.1, 8000), tmp_path / "a.wav")
    with pytest.raises(ValueError):
        pl.load_audio(tmp_path / "a.wav")


class TestCli:
    def test_empty_window_exit_code(self, corpus, tmp_path):
        cfg = {"window": {"mse_threshold": 1e-9, "kl_threshold": 1e-9}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        code = main(["train", str(corpus / "mix_000.wav"), "-o", str(tmp_path / "t"), "--profile", "desk",
                     "--config", str(tmp_path / "c.json"), "--epochs", "1"])
        assert code == 2

    def test_error_exit_code(self, tmp_path, capsys):
        code = main(["separate", str(tmp_path / "nope.ckpt"), str(tmp_path / "in.wav"), str(tmp_path / "o.wav"),
                     "--profile", "desk"])
        assert code == 1 and "error" in capsys.readouterr().err

    def test_synth_and_separate(self, trained, corpus, tmp_path):
        cfg, res, out = trained
        code = main(["separate", str(res.checkpoint_paths[-1]), str(corpus / "mix_000.wav"), str(tmp_path / "o.wav"),
                     "--profile", "desk", "--mask-gain", "0.7", "--lambda-scale", "0.3"])
        assert code == 0 and (tmp_path / "o.wav").exists()

    def test_evaluate_pairs(self, trained, corpus, tmp_path):
        cfg, res, out = trained
        code = main(["evaluate", str(res.checkpoint_paths[-1]),
                     f"{corpus / 'mix_001.wav'}:{corpus / 'speech_001.wav'}", "-o", str(tmp_path / "r.csv"),
                     "--profile", "desk"])
        assert code == 0 and (tmp_path / "r.csv").exists()
