"""Frame-level articulation knowledge on the separator's STFT grid, projection and fusion."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dsp import HOP, Spectrogram
from .errors import InputError
from .formats import read_matrix, write_matrix
from .lexicon import MANNER_ORDER, N_MANNER

D_FEATURES = 1025


@dataclass(frozen=True)
class FrameGrid:
    """Frame-center times ``n * hop / sample_rate`` for ``n_frames`` frames."""

    n_frames: int
    hop: int = HOP
    sample_rate: int = 44100

    @classmethod
    def of(cls, spec: Spectrogram) -> "FrameGrid":
        return cls(spec.n_frames, spec.hop, spec.sample_rate)

    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.hop / self.sample_rate


def _grid(spec_grid) -> FrameGrid:
    return FrameGrid.of(spec_grid) if isinstance(spec_grid, Spectrogram) else spec_grid


def _frames_in(times: np.ndarray, start: float, end: float) -> slice:
    # frame n is covered iff start <= t_n < end
    lo = int(np.searchsorted(times, start, side="left"))
    hi = int(np.searchsorted(times, end, side="left"))
    return slice(lo, hi)


def rasterize(alignments, spec_grid) -> np.ndarray:
    """One-hot-or-zero (N, 7) uint8 matrix from timestamped token records.

    Records are dicts with ``manner``, ``start_s``, ``end_s`` and optionally
    ``line_start_s``; where tokens of different lines overlap, the line that
    starts later wins.
    """
    grid = _grid(spec_grid)
    times = grid.times()
    out = np.zeros((grid.n_frames, N_MANNER), dtype=np.uint8)
    recs = list(alignments)
    for r in recs:
        if r["start_s"] < 0 or r["end_s"] < 0:
            raise InputError(f"negative alignment time in {r}")
    order = sorted(range(len(recs)), key=lambda i: (recs[i].get("line_start_s", 0.0), i))
    index = {c.value: c.index for c in MANNER_ORDER}
    for i in order:
        r = recs[i]
        sl = _frames_in(times, r["start_s"], r["end_s"])
        out[sl] = 0
        out[sl, index[str(r["manner"])]] = 1
    return out


def shift_records(records, offset_s: float) -> list[dict]:
    """Re-reference records to a chunk starting at ``offset_s``; tokens before the chunk are clipped."""
    out = []
    for r in records:
        s, e = r["start_s"] - offset_s, r["end_s"] - offset_s
        if e <= 0:
            continue
        rec = dict(r, start_s=max(s, 0.0), end_s=e)
        rec["line_start_s"] = r.get("line_start_s", 0.0) - offset_s
        out.append(rec)
    return out


@dataclass
class Projector:
    weights: np.ndarray  # (m, d)
    bias: np.ndarray  # (d,)

    @classmethod
    def init(cls, m: int = N_MANNER, d: int = D_FEATURES, seed: int = 0, sigma: float = 0.01) -> "Projector":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, sigma, size=(m, d)), np.zeros(d))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


def project(matrix: np.ndarray, proj: Projector) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != proj.weights.shape[0]:
        raise InputError(f"articulation matrix {matrix.shape} does not fit projector {proj.weights.shape}")
    return matrix @ proj.weights + proj.bias


def fuse(audio_features: np.ndarray, projected: np.ndarray) -> np.ndarray:
    if np.shape(audio_features) != np.shape(projected):
        raise InputError(f"cannot fuse {np.shape(audio_features)} with {np.shape(projected)}")
    return np.asarray(audio_features) + np.asarray(projected)


def va_from_script(script, spec_grid, mode: str = "selection_only", matrix: np.ndarray | None = None):
    """Voice activity from script line intervals.

    ``selection_only`` returns the (N,) flag vector; ``extra_dim`` appends the
    flags as an eighth column to ``matrix`` (zeros when not given).
    """
    grid = _grid(spec_grid)
    times = grid.times()
    va = np.zeros(grid.n_frames, dtype=np.uint8)
    for line in script:
        start, end = (line.start_s, line.end_s) if hasattr(line, "start_s") else (line["start_s"], line["end_s"])
        va[_frames_in(times, start, end)] = 1
    if mode == "selection_only":
        return va
    if mode == "extra_dim":
        base = np.zeros((grid.n_frames, N_MANNER), np.uint8) if matrix is None else np.asarray(matrix)
        return np.hstack([base, va[:, None].astype(base.dtype)])
    raise InputError(f"unknown VA mode {mode!r}")


def save_matrix(path, matrix: np.ndarray) -> None:
    write_matrix(path, matrix, dtype="u8")


def load_matrix(path) -> np.ndarray:
    return read_matrix(path).astype(np.uint8)


def matrix_to_json(matrix: np.ndarray) -> str:
    labels = [c.value for c in MANNER_ORDER][:matrix.shape[1]]
    if matrix.shape[1] > len(labels):
        labels.append("VA")
    return json.dumps({"columns": labels, "rows": np.asarray(matrix).astype(int).tolist()})
