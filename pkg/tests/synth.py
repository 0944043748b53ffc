"""Synthetic models, corpora and brute-force oracles shared by the test modules."""
from __future__ import annotations

import itertools

import numpy as np
from scipy.stats import norm

from articsep.align import GmmHmm, GmmHmmSet, TrainLine
from articsep.dsp import HOP, AudioClip
from articsep.knowledge import FrameGrid, rasterize
from articsep.lexicon import MANNER_ORDER, SIL


def make_model(label, means, variances=None, p_self=0.6) -> GmmHmm:
    """Single-Gaussian (K=1) left-to-right model; ``means`` is (S, D)."""
    means = np.atleast_2d(np.asarray(means, dtype=float))
    s, d = means.shape
    var = np.ones((s, d)) if variances is None else np.broadcast_to(variances, (s, d)).astype(float)
    p = np.broadcast_to(np.asarray(p_self, float), (s,))
    return GmmHmm(label, means[:, None, :].copy(), var[:, None, :].copy(), np.zeros((s, 1)),
                  np.log(np.stack([p, 1 - p], axis=1)))


def make_set(models: dict) -> GmmHmmSet:
    dim = next(iter(models.values())).dim
    return GmmHmmSet(dict(models), np.full(dim, 1e-6))


def random_set(rng, labels, n_states, dim=1, spread=3.0, with_sil=False) -> GmmHmmSet:
    models = {}
    for lab in labels:
        s = n_states[lab] if isinstance(n_states, dict) else n_states
        models[lab] = make_model(lab, rng.normal(0, spread, (s, dim)), rng.uniform(0.5, 2.0, (s, dim)),
                                 rng.uniform(0.2, 0.8, s))
    if with_sil:
        models[SIL] = make_model(SIL, rng.normal(0, spread, (2, dim)), 1.0, rng.uniform(0.2, 0.8, 2))
    return make_set(models)


def _state_loglik(model: GmmHmm, x: np.ndarray) -> np.ndarray:
    mu = model.means[:, 0, :]
    sd = np.sqrt(model.variances[:, 0, :])
    return norm.logpdf(x[:, None, :], mu[None], sd[None]).sum(axis=2)


def brute_force_align(x, tokens, models: GmmHmmSet, allow_sil=False, tie_rtol=1e-10):
    """Exhaustive maximum over every legal state path (K=1 models only).

    Returns ``(score, [(start_frame, end_frame), ...])`` with 1-based inclusive
    frames per token. Scores within ``tie_rtol`` of the maximum count as ties,
    resolved towards the lexicographically smallest sequence of token starts.
    """
    x = np.asarray(x, float).reshape(len(x), -1)
    n = x.shape[0]
    slots = len(tokens) + 1 if allow_sil else 0
    found = []  # (score, token bounds)
    for sil_mask in itertools.product([False, True], repeat=slots):
        units = []
        for i, tok in enumerate(tokens):
            if allow_sil and sil_mask[i]:
                units.append((SIL, None))
            units.append((tok, i))
        if allow_sil and sil_mask[-1]:
            units.append((SIL, None))
        chain = []  # (unit index, state) per network state
        for u, (lab, _) in enumerate(units):
            for s in range(models[lab].n_states):
                chain.append((u, s))
        n_chain = len(chain)
        if n_chain > n:
            continue
        ll = {lab: _state_loglik(models[lab], x) for lab, _ in units}
        for cuts in itertools.combinations(range(1, n), n_chain - 1):
            edges = (0, *cuts, n)
            score = 0.0
            for c, (u, s) in enumerate(chain):
                lab = units[u][0]
                a, b = edges[c], edges[c + 1]
                lt = models[lab].log_trans[s]
                score += ll[lab][a:b, s].sum() + (b - a - 1) * lt[0] + lt[1]
            bounds = []
            for u, (lab, tok) in enumerate(units):
                if tok is None:
                    continue
                idx = [c for c, (uu, _) in enumerate(chain) if uu == u]
                bounds.append((edges[idx[0]] + 1, edges[idx[-1] + 1]))
            found.append((score, bounds))
    if not found:
        return -np.inf, None
    best = max(sc for sc, _ in found)
    tied = [b for sc, b in found if sc >= best - tie_rtol * (1 + abs(best))]
    return best, min(tied, key=lambda b: [s for s, _ in b])


def sample_line(rng, models: GmmHmmSet, tokens, min_dur=1, max_dur=None):
    """Frames drawn from the concatenated HMM of ``tokens``; returns (x, true per-token (start, end))."""
    xs, bounds, t = [], [], 0
    for tok in tokens:
        m = models[tok]
        start = t
        for s in range(m.n_states):
            p_self = np.exp(m.log_trans[s, 0])
            dur = max(min_dur, int(rng.geometric(1 - p_self)))
            if max_dur:
                dur = min(dur, max_dur)
            w = np.exp(m.log_weights[s])
            comp = rng.choice(m.n_mix, size=dur, p=w / w.sum())
            xs.append(m.means[s, comp] + np.sqrt(m.variances[s, comp]) * rng.standard_normal((dur, m.dim)))
            t += dur
        bounds.append((start + 1, t))
    return np.vstack(xs), bounds


def gaussian_corpus(rng, n_lines=200, means=None, p_self=0.9, dim=1, tokens_per_line=(2, 4)):
    """Two-class corpus with known per-state Gaussian emissions (unit variance)."""
    means = means or {"NAS": -5.0, "VWL": 5.0}
    truth = make_set({lab: make_model(lab, np.full((5, dim), mu), 1.0, p_self) for lab, mu in means.items()})
    labels = list(means)
    lines = []
    for i in range(n_lines):
        k = int(rng.integers(tokens_per_line[0], tokens_per_line[1] + 1))
        toks = [labels[int(rng.integers(len(labels)))] for _ in range(k)]
        x, _ = sample_line(rng, truth, toks)
        lines.append(TrainLine(x, toks, f"line{i}"))
    return truth, lines


# -------------------------------------------------------- band-structured corpus

SR = 16000
BAND_EDGES = np.linspace(300.0, 7700.0, len(MANNER_ORDER) + 1)


def _band(rng, n, k):
    lo, hi = BAND_EDGES[k] + 60, BAND_EDGES[k + 1] - 60
    spec = np.zeros(n // 2 + 1, complex)
    f = np.fft.rfftfreq(n, 1 / SR)
    sel = (f >= lo) & (f <= hi)
    spec[sel] = rng.standard_normal(sel.sum()) + 1j * rng.standard_normal(sel.sum())
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-12)


def band_example(rng, seconds=1.5, sr=SR):
    """Target speech whose articulation class decides its frequency band, plus a same-looking distractor.

    Each token of class ``c`` is band-limited noise in band ``c``; the
    distractor plays band noise of a different class at the same time, so the
    mixture alone cannot tell which band is speech.
    """
    n = int(seconds * sr)
    target, other = np.zeros(n), np.zeros(n)
    recs, t = [], int(rng.integers(0, sr // 20))
    while True:
        dur = int(rng.uniform(0.08, 0.25) * sr)
        if t + dur > n:
            break
        c = int(rng.integers(len(MANNER_ORDER)))
        c2 = (c + int(rng.integers(1, len(MANNER_ORDER)))) % len(MANNER_ORDER)
        ramp = np.minimum(1.0, np.minimum(np.arange(dur), np.arange(dur)[::-1]) / (0.004 * sr))
        target[t:t + dur] = 0.3 * _band(rng, dur, c) * ramp
        other[t:t + dur] = 0.3 * _band(rng, dur, c2) * ramp
        recs.append({"manner": MANNER_ORDER[c].value, "start_s": t / sr, "end_s": (t + dur) / sr})
        t += dur + int(rng.uniform(0.0, 0.05) * sr)
    mix = AudioClip(target + other, sr)
    grid = FrameGrid(1 + n // HOP, HOP, sr)
    return mix, AudioClip(target, sr), rasterize(recs, grid)
