"""Forced alignment of manner-token sequences to feature frames."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..dsp import FrameFeatures
from ..errors import AlignmentError, InputError
from ..lexicon import SIL
from .hmm import GmmHmmSet
from .network import LineNetwork, build_units, label_of, viterbi

FRAME_PERIOD = 0.010


@dataclass
class TokenAlignment:
    """One aligned token. Frames are 1-based and ``end_frame`` is inclusive."""

    index: int
    manner: str
    start_frame: int
    end_frame: int
    phoneme: str = ""
    line_id: str = ""


@dataclass
class AlignmentResult:
    tokens: list[TokenAlignment]
    score: float
    state_path: np.ndarray
    units: list  # unit label actually visited, in order (includes chosen SILs)


def _as_matrix(features, models: GmmHmmSet) -> np.ndarray:
    if isinstance(features, FrameFeatures):
        fp = features.config.fingerprint()
        if models.fingerprint and fp != models.fingerprint:
            raise InputError(f"feature config {fp} does not match model config {models.fingerprint}")
        return features.vectors
    x = np.asarray(features, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def align_line(features, tokens, models: GmmHmmSet, allow_sil: bool = False,
               line_id: str = "", emis_cache: dict | None = None) -> AlignmentResult:
    x = _as_matrix(features, models)
    if len(tokens) == 0:
        raise InputError(f"line {line_id or '?'}: empty token sequence")
    units = build_units(tokens, allow_sil and SIL in models)
    net = LineNetwork(units, models)
    n = x.shape[0]
    if n < net.min_frames:
        raise AlignmentError(
            f"line {line_id or '?'}: {n} frames cannot hold {len(tokens)} tokens "
            f"({net.min_frames} frames needed)")
    score, path = viterbi(net, net.emissions(x, emis_cache))
    if not np.isfinite(score):
        raise AlignmentError(f"line {line_id or '?'}: no finite-scoring alignment")

    path_units = net.unit_of[path]
    out, visited = [], []
    t = 0
    while t < n:
        u = path_units[t]
        t2 = t
        while t2 + 1 < n and path_units[t2 + 1] == u:
            t2 += 1
        unit = units[u]
        visited.append(unit.label)
        if unit.token is not None:
            tok = tokens[unit.token]
            phone = tok[1] if isinstance(tok, tuple) and len(tok) > 1 else ""
            out.append(TokenAlignment(unit.token + 1, label_of(tok), t + 1, t2 + 1, phone, line_id))
        t = t2 + 1
    return AlignmentResult(out, score, path, visited)


def forced_align(features, tokens, models: GmmHmmSet, allow_sil: bool = False,
                 line_id: str = "") -> list[TokenAlignment]:
    """Globally optimal token boundaries under the line's concatenated HMM.

    ``tokens`` is a sequence of manner labels or ``(manner, phoneme)`` pairs.
    Every token occupies at least one frame per emitting state. With
    ``allow_sil`` (and a SIL model present) optional silence may be inserted
    before, between and after tokens.
    """
    return align_line(features, tokens, models, allow_sil, line_id).tokens


def line_to_global(alignments, line_start_time: float, utt: str = "",
                   frame_period: float = FRAME_PERIOD) -> list[dict]:
    """Attach absolute times: frame ``s`` starts at ``(s-1)*period``, frame ``e`` ends at ``e*period``."""
    if line_start_time < 0:
        raise InputError("line start time must be non-negative")
    out = []
    for a in alignments:
        out.append({
            "utt": utt,
            "line": a.line_id,
            "i": a.index,
            "manner": a.manner,
            "phoneme": a.phoneme,
            "start_s": round(line_start_time + (a.start_frame - 1) * frame_period, 6),
            "end_s": round(line_start_time + a.end_frame * frame_period, 6),
            "line_start_s": line_start_time,
        })
    return out


def global_to_line(records, frame_period: float = FRAME_PERIOD) -> list[TokenAlignment]:
    out = []
    for r in records:
        rel_s = r["start_s"] - r["line_start_s"]
        rel_e = r["end_s"] - r["line_start_s"]
        out.append(TokenAlignment(int(r["i"]), r["manner"], int(round(rel_s / frame_period)) + 1,
                                  int(round(rel_e / frame_period)), r.get("phoneme", ""),
                                  r.get("line", "")))
    return out


def to_record(a: TokenAlignment) -> dict:
    return asdict(a)
