"""Synthetic speech/music corpora for desk-scale experiments.

"Speech" is a sequence of voiced syllables: harmonic tone complexes with a
gliding fundamental, a formant-shaped spectral envelope and short silences in
between. "Music" is a short loop (sustained chord plus decaying percussive
noise hits) repeated for the whole clip, so it is periodic and close to
stationary. Speakers are parameter families (f0 range and formant set) so
corpora with a controlled number of spectral modes can be built.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_io import AudioBuffer, DEFAULT_SAMPLE_RATE


@dataclass(frozen=True)
class Speaker:
    f0_low: float
    f0_high: float
    formants: tuple[float, ...]
    bandwidth: float = 300.0


# spectrally distinct families used to build multi-mode corpora
SPEAKERS = (
    Speaker(100.0, 140.0, (500.0, 1500.0)),
    Speaker(210.0, 280.0, (2600.0, 3800.0)),
    Speaker(140.0, 190.0, (5200.0, 6200.0), 400.0),
    Speaker(300.0, 380.0, (900.0, 7000.0), 350.0),
)

CHORDS = (
    (261.63, 329.63, 392.00),
    (293.66, 369.99, 440.00),
    (220.00, 277.18, 329.63),
    (196.00, 246.94, 293.66),
    (349.23, 440.00, 523.25),
)


def _envelope(freqs, formants, bandwidth):
    env = np.zeros_like(freqs)
    for fc in formants:
        env += np.exp(-0.5 * ((freqs - fc) / bandwidth) ** 2)
    return env + 0.02


def speech(duration: float, gen: np.random.Generator, speaker: Speaker = SPEAKERS[0],
           sample_rate: int = DEFAULT_SAMPLE_RATE, jitter: float = 0.1) -> np.ndarray:
    """Syllables of 80-250 ms separated by 20-80 ms pauses, unit RMS over voiced parts."""
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    nyq = sample_rate / 2.0
    pos = int(gen.integers(0, int(0.05 * sample_rate) + 1))
    while pos < n:
        seg = int(gen.uniform(0.08, 0.25) * sample_rate)
        seg = min(seg, n - pos)
        if seg < 16:
            break
        t = np.arange(seg) / sample_rate
        f_start, f_end = gen.uniform(speaker.f0_low, speaker.f0_high, size=2)
        f0 = f_start + (f_end - f_start) * t / max(t[-1], 1e-9)
        phase0 = 2.0 * np.pi * np.cumsum(f0) / sample_rate
        formants = tuple(fc * gen.uniform(1 - jitter, 1 + jitter) for fc in speaker.formants)
        sig = np.zeros(seg)
        for h in range(1, int(nyq / speaker.f0_low)):
            fh = h * f0
            amp = _envelope(fh, formants, speaker.bandwidth) * (fh < 0.95 * nyq)
            if not amp.any():
                continue
            sig += amp * np.sin(h * phase0 + gen.uniform(0, 2 * np.pi))
        sig *= np.sin(np.pi * np.arange(seg) / seg) ** 0.5
        out[pos:pos + seg] = sig
        pos += seg + int(gen.uniform(0.02, 0.08) * sample_rate)
    voiced = np.abs(out) > 0
    if voiced.any():
        out /= np.sqrt(np.mean(out[voiced] ** 2))
    return out


def music(duration: float, gen: np.random.Generator, sample_rate: int = DEFAULT_SAMPLE_RATE,
          loop_seconds: float = 0.5, chord=None) -> np.ndarray:
    """A chord-plus-percussion loop tiled to ``duration``; unit RMS."""
    n = int(round(duration * sample_rate))
    loop_n = int(round(loop_seconds * sample_rate))
    chord = CHORDS[int(gen.integers(len(CHORDS)))] if chord is None else chord
    t = np.arange(loop_n) / sample_rate
    loop = np.zeros(loop_n)
    for f in chord:
        # whole number of cycles per loop keeps the tiling seamless
        f = round(f * loop_seconds) / loop_seconds
        for h, a in ((1, 1.0), (2, 0.5), (3, 0.25)):
            loop += a * np.sin(2 * np.pi * h * f * t)
    loop /= np.sqrt(np.mean(loop ** 2))
    beats = 4
    hit_n = loop_n // beats
    decay = np.exp(-np.arange(hit_n) / (0.015 * sample_rate))
    noise = gen.standard_normal(hit_n)
    for b in range(beats):
        loop[b * hit_n:(b + 1) * hit_n] += (1.5 if b % 2 == 0 else 0.8) * noise * decay
    tiled = np.tile(loop, n // loop_n + 1)[:n]
    offset = int(gen.integers(loop_n))
    tiled = np.roll(tiled, offset)
    return tiled / np.sqrt(np.mean(tiled ** 2))


def mix(speech_sig: np.ndarray, music_sig: np.ndarray, snr_db: float) -> np.ndarray:
    """Speech plus music scaled so the speech-to-music power ratio is ``snr_db``."""
    ps = np.mean(speech_sig ** 2)
    pm = np.mean(music_sig ** 2)
    scale = np.sqrt(ps / (pm * 10.0 ** (snr_db / 10.0))) if pm > 0 else 0.0
    return speech_sig + scale * music_sig


@dataclass
class Clip:
    mixture: AudioBuffer
    speech: AudioBuffer
    music: AudioBuffer | None
    speaker: int


def _normalize_pair(mixture, parts, peak=0.9):
    g = peak / max(np.max(np.abs(mixture)), 1e-12)
    return mixture * g, [p * g if p is not None else None for p in parts]


def make_corpus(n_clips: int, seed: int, duration: float = 1.0, speakers=(0,),
                music_fraction: float = 0.5, snr_db: float = 0.0,
                sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[Clip]:
    """Clips cycling through ``speakers``; the first ``music_fraction`` of each
    speaker's clips carry background music at ``snr_db``."""
    gen = np.random.Generator(np.random.PCG64(seed))
    clips = []
    n_music = int(round(music_fraction * n_clips))
    for i in range(n_clips):
        spk = speakers[i % len(speakers)]
        s = speech(duration, gen, SPEAKERS[spk], sample_rate)
        if i < n_music:
            m = music(duration, gen, sample_rate)
            x = mix(s, m, snr_db)
            m_scaled = x - s
        else:
            x, m_scaled = s.copy(), None
        x, (s, m_scaled) = _normalize_pair(x, [s, m_scaled])
        clips.append(Clip(AudioBuffer(x, sample_rate), AudioBuffer(s, sample_rate),
                          AudioBuffer(m_scaled, sample_rate) if m_scaled is not None else None, spk))
    return clips
