"""Mask-based speech extractor conditioned on fused articulation features.

Any object with ``forward(fused) -> mask`` can act as the estimator in
:func:`extract`; trainable estimators additionally expose ``params()`` and
``backward(cache, dmask)``. :class:`RefNet` is the shipped frame-wise network.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .dsp import HOP, AudioClip, Spectrogram, istft, stft
from .errors import FormatError, InputError, TrainingError
from .knowledge import Projector, fuse, project

ASEP_MAGIC = b"ASEP"
ASEP_VERSION = 1


class MaskEstimator(Protocol):
    def forward(self, fused: np.ndarray) -> np.ndarray: ...


def compress(mag: np.ndarray, mode: str = "log1p") -> np.ndarray:
    """Audio-feature transform applied to |STFT| before fusion."""
    if mode == "none":
        return mag
    if mode == "log1p":
        return np.log1p(mag)
    raise InputError(f"unknown compression {mode!r}")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class RefNet:
    """Frame-wise ``d -> hidden (tanh) -> d (logistic)`` mask network."""

    def __init__(self, d: int, hidden: int = 256, seed: int = 0, zero: bool = False):
        rng = np.random.default_rng(seed)
        self.d, self.hidden = d, hidden
        if zero:
            self.w1, self.w2 = np.zeros((d, hidden)), np.zeros((hidden, d))
        else:
            self.w1 = rng.normal(0.0, np.sqrt(1.0 / d), (d, hidden))
            self.w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, d))
        self.b1 = np.zeros(hidden)
        self.b2 = np.zeros(d)

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward_cache(self, fused: np.ndarray):
        h = np.tanh(fused @ self.w1 + self.b1)
        mask = _sigmoid(h @ self.w2 + self.b2)
        return mask, (fused, h, mask)

    def forward(self, fused: np.ndarray) -> np.ndarray:
        if fused.shape[-1] != self.d:
            raise InputError(f"expected {self.d} features per frame, got {fused.shape[-1]}")
        return self.forward_cache(fused)[0]

    def backward(self, cache, dmask: np.ndarray):
        """Parameter gradients and the gradient w.r.t. the fused input."""
        fused, h, mask = cache
        dz = dmask * mask * (1.0 - mask)
        da = (dz @ self.w2.T) * (1.0 - h * h)
        grads = {"w1": fused.T @ da, "b1": da.sum(axis=0), "w2": h.T @ dz, "b2": dz.sum(axis=0)}
        return grads, da @ self.w1.T


class ConstantMask:
    """Estimator returning a fixed mask value everywhere (identity / mute / sanity checks)."""

    def __init__(self, value: float):
        self.value = float(value)

    def forward(self, fused):
        return np.full(np.shape(fused), self.value)


def forward(model: MaskEstimator, fused: np.ndarray) -> np.ndarray:
    return model.forward(fused)


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    chunk_seconds: float = 6.0
    batch_size: int = 4
    steps: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hidden: int = 256
    compression: str = "log1p"

    def __post_init__(self):
        for name in ("chunk_seconds", "batch_size", "steps", "hidden"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise InputError("learning_rate must be non-negative")


@dataclass
class Example:
    """One training item: mixture magnitude, articulation matrix, target magnitude."""

    mix_mag: np.ndarray  # (N, d)
    artic: np.ndarray  # (N, m)
    target_mag: np.ndarray  # (N, d)

    @classmethod
    def from_audio(cls, mixture: AudioClip, target: AudioClip, artic: np.ndarray) -> "Example":
        mix = stft(mixture).magnitude()
        tgt = stft(target).magnitude()
        a = _fit_rows(np.asarray(artic, dtype=np.float64), mix.shape[0])
        return cls(mix, a, tgt)


def loss(est_mag: np.ndarray, target_mag: np.ndarray) -> float:
    """Mean absolute error over all bins."""
    if np.shape(est_mag) != np.shape(target_mag):
        raise InputError("loss operands differ in shape")
    return float(np.mean(np.abs(np.asarray(est_mag) - np.asarray(target_mag))))


def loss_and_grads(model: RefNet, proj: Projector, batch, compression: str = "log1p"):
    mix = np.vstack([ex.mix_mag for ex in batch])
    art = np.vstack([ex.artic for ex in batch]).astype(np.float64)
    tgt = np.vstack([ex.target_mag for ex in batch])
    fused = fuse(compress(mix, compression), project(art, proj))
    mask, cache = model.forward_cache(fused)
    diff = mask * mix - tgt
    value = float(np.mean(np.abs(diff)))
    dmask = np.sign(diff) * mix / diff.size
    grads, dfused = model.backward(cache, dmask)
    grads["proj_w"] = art.T @ dfused
    grads["proj_b"] = dfused.sum(axis=0)
    return value, grads


def _all_params(model: RefNet, proj: Projector) -> dict[str, np.ndarray]:
    params = dict(model.params())
    params["proj_w"] = proj.weights
    params["proj_b"] = proj.bias
    return params


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    def update(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_step(model: RefNet, proj: Projector, batch, config: TrainConfig,
               optimizer: Adam | None = None) -> float:
    """One Adam update of network and projector in place; returns the pre-update loss."""
    if not batch:
        raise InputError("empty training batch")
    optimizer = optimizer or Adam.from_config(config)
    value, grads = loss_and_grads(model, proj, batch, config.compression)
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
        raise TrainingError(f"non-finite loss {value} at step {optimizer.t}; gradient norms {norms}")
    optimizer.update(_all_params(model, proj), grads)
    return value


def fit(model: RefNet, proj: Projector, examples, config: TrainConfig, log=None) -> list[float]:
    """Train for ``config.steps`` steps on batches drawn with a seeded generator."""
    rng = np.random.default_rng(config.seed)
    opt = Adam.from_config(config)
    history = []
    for step in range(config.steps):
        idx = rng.choice(len(examples), size=min(config.batch_size, len(examples)), replace=False)
        value = train_step(model, proj, [examples[i] for i in sorted(idx)], config, opt)
        history.append(value)
        if log is not None:
            log(step, value)
    return history


def evaluate_loss(model: RefNet, proj: Projector, examples, compression: str = "log1p") -> float:
    total, count = 0.0, 0
    for ex in examples:
        fused = fuse(compress(ex.mix_mag, compression), project(ex.artic.astype(np.float64), proj))
        diff = model.forward(fused) * ex.mix_mag - ex.target_mag
        total += np.abs(diff).sum()
        count += diff.size
    return total / count


# ---------------------------------------------------------------- inference


def _fit_rows(matrix: np.ndarray, n: int) -> np.ndarray:
    if matrix.shape[0] >= n:
        return matrix[:n]
    return np.vstack([matrix, np.zeros((n - matrix.shape[0], matrix.shape[1]), matrix.dtype)])


def apply_mask(mixture: AudioClip, mask: np.ndarray) -> AudioClip:
    spec = stft(mixture)
    return istft(Spectrogram(spec.frames * mask, spec.n_fft, spec.hop, spec.sample_rate), len(mixture))


def _extract_single(model, mixture: AudioClip, artic: np.ndarray, proj: Projector | None,
                    compression: str) -> AudioClip:
    spec = stft(mixture)
    mag = spec.magnitude()
    feats = compress(mag, compression)
    if proj is not None:
        feats = fuse(feats, project(_fit_rows(np.asarray(artic, np.float64), spec.n_frames), proj))
    mask = model.forward(feats)
    return istft(Spectrogram(spec.frames * mask, spec.n_fft, spec.hop, spec.sample_rate), len(mixture))


def segment_layout(n_samples: int, sample_rate: int, segment_s: float = 6.0, hop: int = HOP):
    """Segment length and start offsets (multiples of ``hop``) for 50%-overlap processing."""
    half = max(1, int(round(segment_s * sample_rate / 2 / hop))) * hop
    seg = 2 * half
    if n_samples <= seg:
        return n_samples, [0]
    starts = list(range(0, n_samples - seg, half)) + [n_samples - seg]
    starts[-1] = (starts[-1] // hop) * hop
    return seg, sorted(set(starts))


def extract(model, mixture: AudioClip, artic, proj: Projector | None,
            segment_s: float = 6.0, compression: str = "log1p") -> AudioClip:
    """Masked-STFT speech estimate; long inputs go through 50%-overlap segments with triangular cross-fades."""
    if len(mixture) == 0:
        raise InputError("empty mixture")
    artic = np.zeros((0, 0)) if artic is None else np.asarray(artic)
    seg, starts = segment_layout(len(mixture), mixture.sample_rate, segment_s)
    if len(starts) == 1:
        return _extract_single(model, mixture, artic, proj, compression)
    out = np.zeros(len(mixture))
    wsum = np.zeros(len(mixture))
    for i, s0 in enumerate(starts):
        end = len(mixture) if i == len(starts) - 1 else min(s0 + seg, len(mixture))
        piece = mixture.slice(s0, end)
        rows = artic[s0 // HOP:] if artic.size else artic
        y = _extract_single(model, piece, rows, proj, compression).samples
        tau = np.arange(y.size) / y.size
        w = 1.0 - np.abs(2.0 * tau - 1.0) + 1e-12
        if i == 0:
            w[tau < 0.5] = 1.0
        if i == len(starts) - 1:
            w[tau >= 0.5] = 1.0
        out[s0:s0 + y.size] += w * y
        wsum[s0:s0 + y.size] += w
    return AudioClip(out / wsum, mixture.sample_rate)


# --------------------------------------------------------------- checkpoint

_PARAM_ORDER = ("w1", "b1", "w2", "b2", "proj_w", "proj_b")


def save_checkpoint(path, model: RefNet, proj: Projector, config: TrainConfig, meta: dict | None = None) -> None:
    header = {"d": model.d, "hidden": model.hidden, "m": proj.weights.shape[0],
              "config": asdict(config), "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    params = _all_params(model, proj)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(ASEP_MAGIC + struct.pack("<II", ASEP_VERSION, len(blob)) + blob)
        for k in _PARAM_ORDER:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[RefNet, Projector, TrainConfig]:
    raw = Path(path).read_bytes()
    if raw[:4] != ASEP_MAGIC:
        raise FormatError(f"{path}: not an ASEP checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != ASEP_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen])
    d, hidden, m = header["d"], header["hidden"], header["m"]
    shapes = {"w1": (d, hidden), "b1": (hidden,), "w2": (hidden, d), "b2": (d,),
              "proj_w": (m, d), "proj_b": (d,)}
    buf = np.frombuffer(raw, dtype="<f8", offset=12 + hlen)
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if buf.size != expected:
        raise FormatError(f"{path}: expected {expected} parameters, found {buf.size}")
    pos, arrays = 0, {}
    for k in _PARAM_ORDER:
        n = int(np.prod(shapes[k]))
        arrays[k] = buf[pos:pos + n].reshape(shapes[k]).copy()
        pos += n
    model = RefNet(d, hidden, zero=True)
    model.w1, model.b1, model.w2, model.b2 = arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"]
    return model, Projector(arrays["proj_w"], arrays["proj_b"]), TrainConfig(**header["config"])
