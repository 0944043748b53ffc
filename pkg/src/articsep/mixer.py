"""Training-chunk generation by direct sampling or random remixing of stems, and eval segmentation.

Dataset layout: ``<root>/<split>/<utt_id>/{mix,speech,music,sfx}.wav`` plus
``script.json`` (an array of ``{start_s, end_s, text}``).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AudioClip, read_wav
from .errors import FormatError, InputError, SamplingError

STEMS = ("speech", "music", "sfx")


@dataclass
class ScriptLine:
    start_s: float
    end_s: float
    text: str
    line_id: str = ""


@dataclass
class Utterance:
    utt_id: str
    speech: AudioClip
    music: AudioClip
    sfx: AudioClip
    mixture: AudioClip
    script: list[ScriptLine] = field(default_factory=list)

    @property
    def sample_rate(self) -> int:
        return self.mixture.sample_rate

    @property
    def n_samples(self) -> int:
        return len(self.mixture)

    def check(self, linear_tol: float | None = None) -> None:
        clips = (self.speech, self.music, self.sfx, self.mixture)
        if len({len(c) for c in clips}) != 1 or len({c.sample_rate for c in clips}) != 1:
            raise FormatError(f"{self.utt_id}: stems differ in length or sample rate")
        dur = self.mixture.duration
        for ln in self.script:
            if not 0 <= ln.start_s < ln.end_s <= dur + 1e-9:
                raise FormatError(f"{self.utt_id}: script line {ln.line_id} [{ln.start_s}, {ln.end_s}] out of range")
        if linear_tol is not None:
            resid = self.mixture.samples - (self.speech.samples + self.music.samples + self.sfx.samples)
            if np.max(np.abs(resid), initial=0.0) > linear_tol:
                raise FormatError(f"{self.utt_id}: mixture is not the sum of its stems")


@dataclass
class MixSpec:
    p_direct: float = 0.25
    p_drop_music: float = 0.20
    p_drop_fx: float = 0.20
    gain_low: float = 0.7
    gain_high: float = 1.3
    chunk_s: float = 6.0
    seed: int = 0

    def __post_init__(self):
        for p in (self.p_direct, self.p_drop_music, self.p_drop_fx):
            if not 0.0 <= p <= 1.0:
                raise InputError(f"probability {p} outside [0, 1]")
        if self.gain_low > self.gain_high:
            raise InputError("gain range is inverted")
        if self.chunk_s <= 0:
            raise InputError("chunk_s must be positive")


def load_script(path, utt_id: str = "") -> list[ScriptLine]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return [ScriptLine(float(r["start_s"]), float(r["end_s"]), r.get("text", ""),
                       r.get("line_id") or f"{utt_id}_{i:03d}") for i, r in enumerate(raw)]


def load_utterance(path) -> Utterance:
    path = Path(path)
    utt_id = path.name
    clips = {name: read_wav(path / f"{name}.wav") for name in (*STEMS, "mix")}
    script_path = path / "script.json"
    script = load_script(script_path, utt_id) if script_path.exists() else []
    utt = Utterance(utt_id, clips["speech"], clips["music"], clips["sfx"], clips["mix"], script)
    utt.check()
    return utt


def load_split(root, split: str) -> list[Utterance]:
    base = Path(root) / split
    if not base.is_dir():
        raise FormatError(f"no split directory {base}")
    return [load_utterance(p) for p in sorted(base.iterdir()) if p.is_dir()]


# ---------------------------------------------------------------- windows


def energy_regions(clip: AudioClip, threshold_db: float = -60.0, min_s: float = 0.2,
                   frame_s: float = 0.01) -> list[tuple[float, float]]:
    """Intervals where the frame RMS exceeds ``threshold_db`` dBFS for at least ``min_s``."""
    flen = max(1, int(round(frame_s * clip.sample_rate)))
    n = len(clip) // flen
    if n == 0:
        return []
    frames = clip.samples[:n * flen].reshape(n, flen)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    with np.errstate(divide="ignore"):
        active = 20.0 * np.log10(rms) > threshold_db
    out = []
    edges = np.flatnonzero(np.diff(np.r_[0, active.astype(int), 0]))
    for a, b in zip(edges[::2], edges[1::2]):
        if (b - a) * flen >= min_s * clip.sample_rate:
            out.append((a * flen / clip.sample_rate, b * flen / clip.sample_rate))
    return out


def speech_regions(utt: Utterance) -> list[tuple[float, float]]:
    """Script intervals (reading voice) plus energetic regions of the speech stem (non-verbal sounds)."""
    return [(ln.start_s, ln.end_s) for ln in utt.script] + energy_regions(utt.speech)


def nonsilent_speech_windows(utt: Utterance, chunk_s: float = 6.0, step_s: float = 0.05) -> np.ndarray:
    """Sample offsets (on a ``step_s`` grid) whose window ``[o, o + chunk)`` meets a speech region."""
    sr = utt.sample_rate
    chunk = int(round(chunk_s * sr))
    step = max(1, int(round(step_s * sr)))
    offsets = np.arange(0, max(0, utt.n_samples - chunk) + 1, step)
    ok = np.zeros(offsets.size, bool)
    for a, b in speech_regions(utt):
        ok |= (offsets < b * sr) & (offsets + chunk > a * sr)
    return offsets[ok]


def eval_segments(utt: Utterance, min_s: float = 6.0) -> list[tuple[float, float]]:
    """Merged script-line intervals, each widened to at least ``min_s`` seconds within the utterance."""
    dur = utt.mixture.duration
    padded = []
    for ln in sorted(utt.script, key=lambda ln: ln.start_s):
        a, b = ln.start_s, ln.end_s
        if b - a < min_s:
            c = 0.5 * (a + b)
            a, b = c - min_s / 2, c + min_s / 2
            if a < 0:
                a, b = 0.0, min(min_s, dur)
            elif b > dur:
                a, b = max(0.0, dur - min_s), dur
        padded.append((a, b))
    merged: list[list[float]] = []
    for a, b in sorted(padded):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


# ---------------------------------------------------------------- sampling


class ChunkSampler:
    """Caches admissible speech windows so repeated draws are cheap."""

    def __init__(self, dataset, spec: MixSpec):
        self.dataset = list(dataset)
        if not self.dataset:
            raise SamplingError("empty dataset")
        self.spec = spec
        self.by_id = {u.utt_id: u for u in self.dataset}
        self.windows = {u.utt_id: nonsilent_speech_windows(u, spec.chunk_s) for u in self.dataset}
        self.eligible = [u.utt_id for u in self.dataset if self.windows[u.utt_id].size]
        if not self.eligible:
            raise SamplingError("no utterance has a non-silent speech window")

    def chunk_len(self, utt: Utterance) -> int:
        return int(round(self.spec.chunk_s * utt.sample_rate))

    def sample(self, rng: np.random.Generator):
        spec = self.spec
        if rng.random() < spec.p_direct:
            utt_id = self.eligible[rng.integers(len(self.eligible))]
            wins = self.windows[utt_id]
            prov = {"branch": "direct", "speech_utt": utt_id, "speech_offset": int(wins[rng.integers(wins.size)])}
        else:
            a = self.eligible[rng.integers(len(self.eligible))]
            wins = self.windows[a]
            off_a = int(wins[rng.integers(wins.size)])
            ids = [u.utt_id for u in self.dataset]
            b = ids[rng.integers(len(ids))]
            c = ids[rng.integers(len(ids))]
            off_b = int(rng.integers(max(0, self.by_id[b].n_samples - self.chunk_len(self.by_id[b])) + 1))
            off_c = int(rng.integers(max(0, self.by_id[c].n_samples - self.chunk_len(self.by_id[c])) + 1))
            drop_music = bool(rng.random() < spec.p_drop_music)
            drop_fx = bool(rng.random() < spec.p_drop_fx)
            gains = rng.uniform(spec.gain_low, spec.gain_high, 3)
            prov = {"branch": "mixed", "speech_utt": a, "speech_offset": off_a,
                    "music_utt": b, "music_offset": off_b, "sfx_utt": c, "sfx_offset": off_c,
                    "drop_music": drop_music, "drop_fx": drop_fx,
                    "gain_speech": float(gains[0]), "gain_music": float(gains[1]), "gain_fx": float(gains[2])}
        mixture, target = self.render(prov)
        return mixture, target, prov

    def render(self, prov: dict) -> tuple[AudioClip, AudioClip]:
        """Rebuild a chunk from its provenance record."""
        a = self.by_id[prov["speech_utt"]]
        n = self.chunk_len(a)
        o = prov["speech_offset"]
        if prov["branch"] == "direct":
            return a.mixture.slice(o, o + n), a.speech.slice(o, o + n)
        speech = prov["gain_speech"] * a.speech.slice(o, o + n).samples
        mix = speech.copy()
        if not prov["drop_music"]:
            b = self.by_id[prov["music_utt"]]
            mix = mix + prov["gain_music"] * b.music.slice(prov["music_offset"], prov["music_offset"] + n).samples
        if not prov["drop_fx"]:
            c = self.by_id[prov["sfx_utt"]]
            mix = mix + prov["gain_fx"] * c.sfx.slice(prov["sfx_offset"], prov["sfx_offset"] + n).samples
        return AudioClip(mix, a.sample_rate), AudioClip(speech, a.sample_rate)


def draw_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator per ``(seed, draw index)`` so draws can be produced in any order."""
    return np.random.default_rng([int(seed), int(index)])


def sample_chunk(dataset, spec: MixSpec, rng: np.random.Generator):
    return ChunkSampler(dataset, spec).sample(rng)


def sample_chunks(dataset, spec: MixSpec, n: int, start: int = 0):
    sampler = ChunkSampler(dataset, spec)
    for i in range(start, start + n):
        mixture, target, prov = sampler.sample(draw_rng(spec.seed, i))
        prov["draw"] = i
        yield mixture, target, prov


def spec_dict(spec: MixSpec) -> dict:
    return asdict(spec)
