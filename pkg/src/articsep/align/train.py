"""Flat-start initialization and embedded Baum-Welch re-estimation of unit GMM-HMMs."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..dsp import FrameFeatures
from ..errors import InitializationError, TrainingError
from ..lexicon import MANNER_ORDER, SIL
from .hmm import GmmHmm, GmmHmmSet
from .network import LineNetwork, _lse, build_units, forward_backward, label_of
from .viterbi import TokenAlignment, align_line

log = logging.getLogger(__name__)

N_STATES = 5
N_SIL_STATES = 3
N_MIX = 4
VAR_FLOOR_SCALE = 1e-3
WEIGHT_FLOOR = 1e-5
TRANS_FLOOR = 1e-5
SPLIT_SPREAD = 0.2


@dataclass
class TrainLine:
    features: np.ndarray  # (N, D)
    tokens: list  # manner labels or (label, phoneme) pairs
    line_id: str = ""

    def __post_init__(self):
        if isinstance(self.features, FrameFeatures):
            self.features = self.features.vectors
        x = np.asarray(self.features, dtype=np.float64)
        self.features = x.reshape(-1, 1) if x.ndim == 1 else x


def _states_for(label: str, n_states: int, sil_states: int) -> int:
    return sil_states if label == SIL else n_states


def flat_start(corpus, classes=None, n_states: int = N_STATES, n_mix: int = N_MIX,
               sil_states: int = N_SIL_STATES, var_floor_scale: float = VAR_FLOOR_SCALE,
               fingerprint: str = "") -> GmmHmmSet:
    """Initialize every unit model from a uniform segmentation of each line.

    Each line's frames are split evenly over the concatenated states of its
    tokens. A state's Gaussian starts at the pooled segment mean and variance;
    the ``n_mix`` components are offset from it by evenly spaced multiples of
    the standard deviation in ``[-0.2, +0.2]``. ``classes`` lists labels that
    must be present (all seven manner classes by default).
    """
    corpus = [ln if isinstance(ln, TrainLine) else TrainLine(*ln) for ln in corpus]
    required = [c.value for c in MANNER_ORDER] if classes is None else [label_of(c) for c in classes]
    if not corpus:
        raise InitializationError("empty training corpus")
    dim = corpus[0].features.shape[1]
    all_x = np.vstack([ln.features for ln in corpus])
    var_floor = np.maximum(var_floor_scale * all_x.var(axis=0), 1e-12)

    stats: dict[str, dict] = {}
    for ln in corpus:
        labels = [label_of(t) for t in ln.tokens]
        sizes = [_states_for(lab, n_states, sil_states) for lab in labels]
        total = sum(sizes)
        n = ln.features.shape[0]
        if total == 0 or n < total:
            log.warning("flat start: skipping line %s (%d frames for %d states)", ln.line_id, n, total)
            continue
        bounds = (np.arange(total + 1) * n) // total
        seg = 0
        for lab, size in zip(labels, sizes):
            st = stats.setdefault(lab, {
                "n": np.zeros(size), "sx": np.zeros((size, dim)), "sxx": np.zeros((size, dim)),
                "self": np.zeros(size), "next": np.zeros(size)})
            for s in range(size):
                frames = ln.features[bounds[seg]:bounds[seg + 1]]
                st["n"][s] += frames.shape[0]
                st["sx"][s] += frames.sum(axis=0)
                st["sxx"][s] += (frames ** 2).sum(axis=0)
                st["self"][s] += frames.shape[0] - 1
                st["next"][s] += 1
                seg += 1

    missing = [lab for lab in required if lab not in stats]
    if missing:
        raise InitializationError("no training data for class(es): " + ", ".join(missing))

    offsets = np.linspace(-SPLIT_SPREAD, SPLIT_SPREAD, n_mix) if n_mix > 1 else np.zeros(1)
    models = {}
    for lab in sorted(stats):
        st = stats[lab]
        mean = st["sx"] / st["n"][:, None]
        var = np.maximum(st["sxx"] / st["n"][:, None] - mean ** 2, var_floor)
        sd = np.sqrt(var)
        means = mean[:, None, :] + offsets[None, :, None] * sd[:, None, :]
        variances = np.repeat(var[:, None, :], n_mix, axis=1)
        log_w = np.full((mean.shape[0], n_mix), -np.log(n_mix))
        p_self = np.clip(st["self"] / (st["self"] + st["next"]), 0.1, 0.9)
        log_trans = np.log(np.stack([p_self, 1.0 - p_self], axis=1))
        models[lab] = GmmHmm(lab, means, variances, log_w, log_trans)
    return GmmHmmSet(models, var_floor, fingerprint)


class _Accumulator:
    def __init__(self, model: GmmHmm):
        s, k, d = model.means.shape
        self.occ = np.zeros((s, k))
        self.sx = np.zeros((s, k, d))
        self.sxx = np.zeros((s, k, d))
        self.n_self = np.zeros(s)
        self.n_adv = np.zeros(s)


def _e_step(models: GmmHmmSet, corpus, allow_sil: bool, accumulate: bool = True):
    accs = {lab: _Accumulator(m) for lab, m in models.models.items()} if accumulate else None
    total_ll, total_frames = 0.0, 0
    use_sil = allow_sil and SIL in models
    for ln in corpus:
        units = build_units(ln.tokens, use_sil)
        net = LineNetwork(units, models)
        x = ln.features
        if x.shape[0] < net.min_frames:
            log.warning("skipping line %s: %d frames < %d states", ln.line_id, x.shape[0], net.min_frames)
            continue
        comp, emis_cache = {}, {}
        for lab in {u.label for u in units}:
            comp[lab] = models[lab].component_log_likelihood(x)
            emis_cache[lab] = _lse(comp[lab], axis=2)
        post = forward_backward(net, net.emissions(x, emis_cache))
        if not np.isfinite(post.log_likelihood):
            raise TrainingError(f"line {ln.line_id or '?'}: log-likelihood underflow")
        total_ll += post.log_likelihood
        total_frames += x.shape[0]
        if not accumulate:
            continue
        for lab in comp:
            js = np.flatnonzero([units[u].label == lab for u in net.unit_of])
            s_idx = net.state_of[js]
            n_s = models[lab].n_states
            occ = np.zeros((x.shape[0], n_s))
            np.add.at(occ.T, s_idx, post.gamma[:, js].T)
            resp = np.exp(comp[lab] - emis_cache[lab][:, :, None])
            w = occ[:, :, None] * resp
            acc = accs[lab]
            acc.occ += w.sum(axis=0)
            acc.sx += np.einsum("tsk,td->skd", w, x)
            acc.sxx += np.einsum("tsk,td->skd", w, x * x)
            np.add.at(acc.n_self, s_idx, post.n_self[js])
            np.add.at(acc.n_adv, s_idx, post.n_advance[js])
    return accs, total_ll, total_frames


def _floored_weights(counts: np.ndarray, floor: float) -> np.ndarray:
    """Maximize ``sum c_k log w_k`` over the simplex subject to ``w_k >= floor``."""
    clamped = np.zeros(counts.size, bool)
    while True:
        free_mass = counts[~clamped].sum()
        w = np.where(clamped, floor, counts * (1.0 - floor * clamped.sum()) / free_mass)
        newly = (w < floor) & ~clamped
        if not newly.any():
            return w
        clamped |= newly


def _m_step(models: GmmHmmSet, accs, weight_floor: float) -> GmmHmmSet:
    out = models.copy()
    for lab, acc in accs.items():
        m = out.models[lab]
        for s in range(m.n_states):
            occ = acc.occ[s]
            if occ.sum() > 1e-10:
                live = occ > 1e-10
                mu = acc.sx[s][live] / occ[live, None]
                var = acc.sxx[s][live] / occ[live, None] - mu ** 2
                m.means[s][live] = mu
                m.variances[s][live] = np.maximum(var, models.var_floor)
                if m.n_mix > 1:
                    m.log_weights[s] = np.log(_floored_weights(occ, weight_floor))
            n = acc.n_self[s] + acc.n_adv[s]
            if n > 1e-10:
                p = float(np.clip(acc.n_self[s] / n, TRANS_FLOOR, 1.0 - TRANS_FLOOR))
                m.log_trans[s] = np.log([p, 1.0 - p])
    return out


def _lines(corpus) -> list[TrainLine]:
    return [ln if isinstance(ln, TrainLine) else TrainLine(*ln) for ln in corpus]


def log_likelihood(models: GmmHmmSet, corpus, allow_sil: bool = False) -> tuple[float, int]:
    """Total forward log-likelihood of the corpus and the number of frames it covers."""
    _, ll, frames = _e_step(models, _lines(corpus), allow_sil, accumulate=False)
    return ll, frames


def train_em(models: GmmHmmSet, corpus, iters: int, allow_sil: bool = False, tol: float = 1e-4,
             weight_floor: float = WEIGHT_FLOOR) -> GmmHmmSet:
    """Embedded Baum-Welch over token-concatenated line HMMs.

    Returns new models; ``log_likelihoods`` on the result holds the corpus
    log-likelihood of the starting model and of each re-estimate. Stops early
    once the per-frame gain falls below ``tol``.
    """
    corpus = _lines(corpus)
    current = models.copy()
    if iters <= 0:
        return current
    accs, ll, frames = _e_step(current, corpus, allow_sil)
    history = [ll]
    for _ in range(iters):
        candidate = _m_step(current, accs, weight_floor)
        accs, ll, frames = _e_step(candidate, corpus, allow_sil)
        history.append(ll)
        current = candidate
        if frames and (history[-1] - history[-2]) / frames < tol:
            break
    current.log_likelihoods = history
    return current


def align_corpus(models: GmmHmmSet, corpus, allow_sil: bool = False):
    """Viterbi-align every line; returns ``(results, per-line visited unit labels)``."""
    return [align_line(ln.features, ln.tokens, models, allow_sil, ln.line_id) for ln in _lines(corpus)]


def two_stage_fa(model1: GmmHmmSet, test_lines, refine_iters: int, em_iters: int = 5,
                 allow_sil: bool = False) -> tuple[GmmHmmSet, list[list[TokenAlignment]]]:
    """Pseudo-label refinement on (mixture) test lines.

    Each round aligns the lines with the current models, takes the aligned unit
    sequence (tokens plus any SILs chosen) as fixed transcription, and
    re-estimates the models on those lines by EM starting from the current
    parameters. Returns the final models and their alignments.
    """
    lines = _lines(test_lines)
    current = model1.copy()
    for _ in range(refine_iters):
        results = align_corpus(current, lines, allow_sil)
        relabeled = [TrainLine(ln.features, res.units, ln.line_id) for ln, res in zip(lines, results)]
        current = train_em(current, relabeled, em_iters, allow_sil=False)
    final = align_corpus(current, lines, allow_sil)
    return current, [r.tokens for r in final]
