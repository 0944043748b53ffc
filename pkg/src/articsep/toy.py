"""Synthetic cinematic-style corpus with known phoneme timing.

Each manner class gets its own crude source-filter signature (harmonic
vowels, low-passed nasals, high-band fricative noise, closure + burst stops,
...), so a GMM-HMM aligner has something to learn. Music is a slowly
modulated chord and effects are filtered noise bursts.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.signal

from .dsp import AudioClip, write_wav
from .formats import write_jsonl
from .lexicon import Lexicon, MannerClass, manner_of

TOY_WORDS = (
    "the sun is warm", "city lights at night", "my brother had a little dog",
    "she saw the fish", "children sing a song", "the judge will watch",
    "rain and thunder", "give me the cheese", "water is cold", "open the door",
    "the king came back", "a big ship on the sea", "change the picture",
    "catch the bottle", "yes the garden is green", "think about the future",
)


def _band_noise(rng, n, sr, lo, hi, order=4):
    sos = scipy.signal.butter(order, [lo, min(hi, 0.45 * sr)], btype="band", fs=sr, output="sos")
    x = scipy.signal.sosfilt(sos, rng.standard_normal(n + 512))[512:]
    return x / (np.std(x) + 1e-12)


def _harmonics(n, sr, f0, formants, t0=0.0):
    t = t0 + np.arange(n) / sr
    out = np.zeros(n)
    k = 1
    while k * f0 < min(7000.0, 0.45 * sr):
        f = k * f0
        amp = sum(np.exp(-0.5 * ((f - fc) / bw) ** 2) for fc, bw in formants) + 0.02
        out += amp * np.sin(2 * np.pi * f * t)
        k += 1
    return out / (np.std(out) + 1e-12)


def phone_signal(manner: MannerClass, n: int, sr: int, rng) -> np.ndarray:
    f0 = rng.uniform(110, 160)
    ramp = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / (0.005 * sr))
    if manner == MannerClass.VWL:
        f1, f2 = rng.uniform(500, 800), rng.uniform(1100, 2000)
        x = 0.25 * _harmonics(n, sr, f0, [(f1, 120), (f2, 150)])
    elif manner == MannerClass.NAS:
        x = 0.12 * _harmonics(n, sr, f0, [(250, 80)])
    elif manner == MannerClass.APR:
        x = 0.16 * _harmonics(n, sr, f0, [(400, 100), (900, 120)])
    elif manner == MannerClass.FLP:
        env = 0.4 + 0.6 * np.abs(np.linspace(-1, 1, n))
        x = 0.10 * env * _harmonics(n, sr, f0, [(350, 100), (1600, 200)])
    elif manner == MannerClass.FRC:
        x = 0.08 * _band_noise(rng, n, sr, 4000, 8000)
    elif manner == MannerClass.STP:
        x = np.zeros(n)
        nb = n // 3
        x[n - nb:] = 0.15 * _band_noise(rng, nb, sr, 1500, 5000) * np.exp(-np.arange(nb) / (0.01 * sr))
    elif manner == MannerClass.AFR:
        x = np.zeros(n)
        nb = n // 2
        x[n - nb:] = 0.10 * _band_noise(rng, nb, sr, 2500, 6000)
    else:
        raise ValueError(manner)
    return x * ramp


def synth_line(text: str, lexicon: Lexicon, sr: int, rng):
    """Waveform of a line plus its phone records ``(manner, phoneme, start_s, end_s)`` relative to the line."""
    from .lexicon import tokenize

    pieces, recs, pos = [], [], 0
    for _, pron in tokenize(text, lexicon):
        for ph in pron:
            manner = manner_of(ph, lexicon.manner_table)
            dur = rng.uniform(0.07, 0.13) if manner != MannerClass.VWL else rng.uniform(0.09, 0.17)
            n = int(round(dur * sr))
            pieces.append(phone_signal(manner, n, sr, rng))
            recs.append((manner.value, ph, pos / sr, (pos + n) / sr))
            pos += n
    return np.concatenate(pieces), recs


def music_stem(n, sr, rng, level=0.06):
    t = np.arange(n) / sr
    root = rng.uniform(90, 220)
    x = np.zeros(n)
    for ratio in (1.0, 1.25, 1.5, 2.0):
        x += np.sin(2 * np.pi * root * ratio * t + rng.uniform(0, 2 * np.pi))
    x *= 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t)
    return level * x / (np.std(x) + 1e-12)


def sfx_stem(n, sr, rng, level=0.05):
    x = np.zeros(n)
    for _ in range(rng.integers(2, 5)):
        dur = int(rng.uniform(0.3, 1.0) * sr)
        start = int(rng.integers(0, max(1, n - dur)))
        lo = rng.uniform(200, 3000)
        burst = _band_noise(rng, dur, sr, lo, lo * rng.uniform(1.5, 3.0))
        x[start:start + dur] += level * burst * np.hanning(dur)
    return x


def make_toy_corpus(root, n_utts: int = 10, n_test: int = 3, duration_s: float = 8.0,
                    sample_rate: int = 44100, seed: int = 0, lexicon: Lexicon | None = None) -> Path:
    """Write the toy corpus under ``root/{train,test}/<utt>/`` and return ``root``."""
    lexicon = lexicon or Lexicon.load()
    root = Path(root)
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    texts = list(TOY_WORDS)
    for u in range(n_utts):
        split = "test" if u >= n_utts - n_test else "train"
        utt_id = f"toy{u:02d}"
        speech = np.zeros(n)
        script, oracle = [], []
        t = rng.uniform(0.3, 0.8)
        li = 0
        while True:
            text = texts[int(rng.integers(len(texts)))]
            wave, recs = synth_line(text, lexicon, sample_rate, rng)
            start = int(round(t * sample_rate))
            if start + wave.size > n - int(0.2 * sample_rate):
                break
            speech[start:start + wave.size] += wave
            s0, s1 = start / sample_rate, (start + wave.size) / sample_rate
            line_id = f"{utt_id}_{li:03d}"
            script.append({"start_s": s0, "end_s": s1, "text": text, "line_id": line_id})
            for i, (manner, ph, a, b) in enumerate(recs, 1):
                oracle.append({"utt": utt_id, "line": line_id, "i": i, "manner": manner, "phoneme": ph,
                               "start_s": round(s0 + a, 6), "end_s": round(s0 + b, 6), "line_start_s": s0})
            li += 1
            t = s1 + rng.uniform(0.4, 1.2)
        music = music_stem(n, sample_rate, rng)
        sfx = sfx_stem(n, sample_rate, rng)
        mix = speech + music + sfx
        d = root / split / utt_id
        for name, x in (("speech", speech), ("music", music), ("sfx", sfx), ("mix", mix)):
            write_wav(d / f"{name}.wav", AudioClip(x, sample_rate))
        (d / "script.json").write_text(json.dumps(script, indent=1) + "\n")
        write_jsonl(d / "oracle_align.jsonl", oracle)
    return root
