"""Audio I/O, centered STFT / weighted overlap-add iSTFT, and an HTK-style MFCC front-end.

The separation path works on 2048-point STFT frames with a hop of 300 samples;
the alignment path works on 39-dimensional MFCCs (25 ms window, 10 ms hop)
computed from audio resampled to 16 kHz.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ConfigurationError, FormatError, InputError

N_FFT = 2048
HOP = 300


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise InputError("audio samples contain NaN or Inf")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def slice(self, start: int, stop: int) -> "AudioClip":
        """Samples [start, stop), zero-padded on the right past the end."""
        seg = self.samples[max(start, 0):max(stop, 0)]
        if seg.size < stop - start:
            seg = np.pad(seg, (0, stop - start - seg.size))
        return AudioClip(seg, self.sample_rate)


@dataclass
class Spectrogram:
    frames: np.ndarray  # (N, n_fft // 2 + 1) complex
    n_fft: int = N_FFT
    hop: int = HOP
    sample_rate: int = 44100

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def frame_times(self) -> np.ndarray:
        """Center time in seconds of every frame (frame n is centered on sample n * hop)."""
        return np.arange(self.n_frames) * self.hop / self.sample_rate

    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


@dataclass
class MfccConfig:
    sample_rate: int = 16000
    win_s: float = 0.025
    hop_s: float = 0.010
    n_fft: int = 512
    n_mels: int = 26
    n_ceps: int = 12
    preemph: float = 0.97
    fmin: float = 0.0
    fmax: float = 8000.0
    energy_floor: float = 1e-10
    delta_window: int = 2
    resample_taps: int = 64

    @property
    def win_length(self) -> int:
        return int(round(self.win_s * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    @property
    def dim(self) -> int:
        return 3 * (self.n_ceps + 1)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FrameFeatures:
    vectors: np.ndarray  # (N, 39)
    config: MfccConfig = field(default_factory=MfccConfig)

    @property
    def n_frames(self) -> int:
        return self.vectors.shape[0]

    @property
    def frame_period(self) -> float:
        return self.config.hop_s


# --------------------------------------------------------------------------- WAV


def read_wav(path) -> AudioClip:
    """Read a PCM16 or float32 RIFF/WAVE file as a mono clip in [-1, 1].

    Stereo input is averaged to mono.
    """
    try:
        rate, data = scipy.io.wavfile.read(str(path))
    except (ValueError, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV file ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")
    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise FormatError(f"{path}: {samples.shape[1]} channels, at most 2 supported")
        samples = samples.mean(axis=1)
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip, fmt: str = "float32") -> None:
    """Write ``clip`` as float32 (default) or PCM16 (clipped to full scale)."""
    if fmt == "float32":
        data = clip.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ConfigurationError(f"unknown WAV format {fmt!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    scipy.io.wavfile.write(str(path), clip.sample_rate, data)


# -------------------------------------------------------------------------- STFT


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_stft_frames(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    if n_samples == 0:
        return 0
    return (n_samples + 2 * (n_fft // 2) - n_fft) // hop + 1


def _frame(x: np.ndarray, length: int, step: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, length)[::step]


def stft(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP) -> Spectrogram:
    """Centered STFT with a periodic Hann window.

    The input is zero-padded by ``n_fft // 2`` on both ends so that frame ``n``
    is centered on sample ``n * hop``.
    """
    x = clip.samples
    n_bins = n_fft // 2 + 1
    if x.size == 0:
        return Spectrogram(np.zeros((0, n_bins), complex), n_fft, hop, clip.sample_rate)
    pad = n_fft // 2
    xp = np.pad(x, pad)
    n = n_stft_frames(x.size, n_fft, hop)
    frames = _frame(xp, n_fft, hop)[:n] * hann(n_fft)
    return Spectrogram(np.fft.rfft(frames, axis=1), n_fft, hop, clip.sample_rate)


def istft(spec: Spectrogram, out_len: int) -> AudioClip:
    """Inverse of :func:`stft` by weighted overlap-add.

    Each inverse frame is multiplied by the analysis window and the sum is
    normalized by the overlapped squared window, which reconstructs any signal
    exactly whenever that sum never vanishes (the NOLA condition).
    """
    n_fft, hop = spec.n_fft, spec.hop
    win = hann(n_fft)
    if hop <= 0 or hop > n_fft or not scipy.signal.check_NOLA(win, n_fft, n_fft - hop):
        raise ConfigurationError(f"hop {hop} with a {n_fft}-point Hann window cannot be inverted")
    if spec.n_frames == 0:
        return AudioClip(np.zeros(out_len), spec.sample_rate)
    frames = np.fft.irfft(spec.frames, n=n_fft, axis=1) * win
    total = n_fft + hop * (spec.n_frames - 1)
    y = np.zeros(total)
    wsum = np.zeros(total)
    w2 = win * win
    for n, frame in enumerate(frames):
        y[n * hop:n * hop + n_fft] += frame
        wsum[n * hop:n * hop + n_fft] += w2
    nz = wsum > 1e-10
    y[nz] /= wsum[nz]
    pad = n_fft // 2
    y = y[pad:pad + out_len]
    if y.size < out_len:
        y = np.pad(y, (0, out_len - y.size))
    return AudioClip(y, spec.sample_rate)


# -------------------------------------------------------------------------- MFCC


def resample(x: np.ndarray, sr_in: int, sr_out: int, taps: int = 64) -> np.ndarray:
    """Band-limited resampling with a Hann-windowed sinc kernel of ``taps`` taps."""
    x = np.asarray(x, dtype=np.float64)
    if sr_in == sr_out or x.size == 0:
        return x.copy()
    n_out = -(-x.size * sr_out // sr_in)
    ratio = sr_in / sr_out
    cutoff = 0.5 * min(1.0, sr_out / sr_in)  # cycles per input sample
    half = taps // 2
    offsets = np.arange(-half + 1, half + 1)
    out = np.empty(n_out)
    chunk = 16384
    for lo in range(0, n_out, chunk):
        t = np.arange(lo, min(lo + chunk, n_out)) * ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        tau = t[:, None] - idx
        kernel = 2 * cutoff * np.sinc(2 * cutoff * tau)
        kernel *= 0.5 + 0.5 * np.cos(np.pi * tau / half)
        valid = (idx >= 0) & (idx < x.size)
        vals = np.where(valid, x[np.clip(idx, 0, x.size - 1)], 0.0)
        out[lo:lo + t.size] = np.sum(kernel * vals, axis=1)
    return out


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular filters equally spaced on the HTK mel scale, shape (n_mels, n_fft//2+1)."""

    def mel(f):
        return 1127.0 * np.log(1.0 + np.asarray(f) / 700.0)

    edges = np.linspace(mel(cfg.fmin), mel(cfg.fmax), cfg.n_mels + 2)
    bins = mel(np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (bins[None, :] - lo) / (mid - lo)
    fall = (hi - bins[None, :]) / (hi - mid)
    return np.clip(np.minimum(rise, fall), 0.0, None)


def deltas(feats: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas over +-``window`` frames with edge-frame replication.

    ``d_t = sum_k k (c_{t+k} - c_{t-k}) / (2 sum_k k^2)``, which maps a sequence
    linear in ``t`` to its slope.
    """
    feats = np.asarray(feats, dtype=np.float64)
    n = feats.shape[0]
    if n == 0:
        return feats.copy()
    padded = np.pad(feats, ((window, window), (0, 0)), mode="edge")
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(feats)
    for k in range(1, window + 1):
        out += k * (padded[window + k:window + k + n] - padded[window - k:window - k + n])
    return out / denom


def n_mfcc_frames(n_samples: int, sample_rate: int, cfg: MfccConfig | None = None) -> int:
    cfg = cfg or MfccConfig()
    n16 = n_samples if sample_rate == cfg.sample_rate else -(-n_samples * cfg.sample_rate // sample_rate)
    if n16 < cfg.win_length:
        return 0
    return (n16 - cfg.win_length) // cfg.hop_length + 1


def mfcc(clip: AudioClip, cfg: MfccConfig | None = None) -> FrameFeatures:
    """39-dim features: 12 cepstra + log energy, plus deltas and delta-deltas."""
    cfg = cfg or MfccConfig()
    x = resample(clip.samples, clip.sample_rate, cfg.sample_rate, cfg.resample_taps)
    wl, hl = cfg.win_length, cfg.hop_length
    if x.size < wl:
        return FrameFeatures(np.zeros((0, cfg.dim)), cfg)
    frames = _frame(x, wl, hl).copy()

    log_e = np.log(np.maximum(np.sum(frames ** 2, axis=1), cfg.energy_floor))

    emph = frames.copy()
    emph[:, 1:] -= cfg.preemph * frames[:, :-1]
    emph[:, 0] *= 1.0 - cfg.preemph
    emph *= np.hamming(wl)
    mag = np.abs(np.fft.rfft(emph, n=cfg.n_fft, axis=1))
    fbank = np.log(np.maximum(mag @ mel_filterbank(cfg).T, cfg.energy_floor))

    m = cfg.n_mels
    i = np.arange(1, cfg.n_ceps + 1)[:, None]
    j = np.arange(1, m + 1)[None, :]
    dct = np.sqrt(2.0 / m) * np.cos(np.pi * i * (j - 0.5) / m)
    static = np.hstack([fbank @ dct.T, log_e[:, None]])

    d1 = deltas(static, cfg.delta_window)
    d2 = deltas(d1, cfg.delta_window)
    return FrameFeatures(np.hstack([static, d1, d2]), cfg)
