"""Line-level HMM graph built by concatenating unit models, with Viterbi and forward-backward.

A line is a sequence of units (manner tokens, optionally interleaved with
skippable SIL units). Every emitting state has a self loop and one or more
forward arcs; all forward arcs out of a state share that state's advance
probability. Scores include the exit transition out of the final state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..lexicon import SIL
from .hmm import GmmHmmSet

NEG_INF = -np.inf
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class Unit:
    label: str
    optional: bool = False
    token: int | None = None  # position in the caller's token list


def label_of(token) -> str:
    tok = token[0] if isinstance(token, tuple) else token
    return str(getattr(tok, "value", tok))


def build_units(tokens, allow_sil: bool = False) -> list[Unit]:
    units = [Unit(SIL, True)] if allow_sil else []
    for i, tok in enumerate(tokens):
        units.append(Unit(label_of(tok), False, i))
        if allow_sil:
            units.append(Unit(SIL, True))
    return units


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    return np.logaddexp.reduce(a, axis=axis)


class LineNetwork:
    def __init__(self, units: list[Unit], models: GmmHmmSet):
        if not units:
            raise ValueError("a line network needs at least one unit")
        self.units = units
        self.models = models
        unit_of, state_of, first, last = [], [], [], []
        for u, unit in enumerate(units):
            n = models[unit.label].n_states
            first.append(len(unit_of))
            for s in range(n):
                unit_of.append(u)
                state_of.append(s)
            last.append(len(unit_of) - 1)
        self.unit_of = np.array(unit_of)
        self.state_of = np.array(state_of)
        self.first, self.last = first, last
        n_states = len(unit_of)
        self.n_states = n_states

        log_self = np.empty(n_states)
        log_next = np.empty(n_states)
        for j in range(n_states):
            lt = models[units[unit_of[j]].label].log_trans[state_of[j]]
            log_self[j], log_next[j] = lt
        self.log_self, self.log_next = log_self, log_next

        preds = [[] for _ in range(n_states)]
        succs = [[] for _ in range(n_states)]
        for j in range(n_states):
            if state_of[j] > 0:
                preds[j].append(j - 1)
                succs[j - 1].append(j)
        for u in range(len(units)):
            v = u - 1
            while v >= 0:
                preds[first[u]].append(last[v])
                succs[last[v]].append(first[u])
                if not units[v].optional:
                    break
                v -= 1
        # Successors in preference order for tie-breaking: furthest target first.
        succs = [sorted(s, reverse=True) for s in succs]
        self.pred, self.pred_logp = self._pad(preds, log_next)
        self.succ, self.succ_mask = self._pad_succ(succs)
        self.succ_logp = np.where(self.succ_mask, log_next[:, None], NEG_INF)

        start = np.zeros(n_states, bool)
        for u, unit in enumerate(units):
            start[first[u]] = True
            if not unit.optional:
                break
        end = np.zeros(n_states, bool)
        for u in range(len(units) - 1, -1, -1):
            end[last[u]] = True
            if not units[u].optional:
                break
        self.start = start
        self.exit = np.where(end, log_next, NEG_INF)
        self.min_frames = sum(models[u.label].n_states for u in units if not u.optional)

    @staticmethod
    def _pad(lists, log_next):
        width = max(1, max(len(x) for x in lists))
        idx = np.zeros((len(lists), width), dtype=np.int64)
        logp = np.full((len(lists), width), NEG_INF)
        for j, src in enumerate(lists):
            for c, i in enumerate(src):
                idx[j, c] = i
                logp[j, c] = log_next[i]
        return idx, logp

    @staticmethod
    def _pad_succ(lists):
        width = max(1, max(len(x) for x in lists))
        idx = np.zeros((len(lists), width), dtype=np.int64)
        mask = np.zeros((len(lists), width), bool)
        for j, dst in enumerate(lists):
            idx[j, :len(dst)] = dst
            mask[j, :len(dst)] = True
        return idx, mask

    def emissions(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        """Log emission densities for every frame and network state, shape (N, n_states)."""
        cache = {} if cache is None else cache
        cols = []
        for u, unit in enumerate(self.units):
            if unit.label not in cache:
                cache[unit.label] = self.models[unit.label].log_emission(x)
            cols.append(cache[unit.label])
        return np.hstack(cols)


def viterbi(net: LineNetwork, emis: np.ndarray) -> tuple[float, np.ndarray]:
    """Best state path and its log score.

    Runs the recursion backwards and traces forwards so that, among paths with
    equal score, every state is entered as early as possible.
    """
    n_frames = emis.shape[0]
    v = np.empty_like(emis)
    v[-1] = emis[-1] + net.exit
    log_self, succ, succ_logp = net.log_self, net.succ, net.succ_logp
    for t in range(n_frames - 2, -1, -1):
        nxt = v[t + 1]
        adv = np.max(succ_logp + nxt[succ], axis=1)
        v[t] = emis[t] + np.maximum(log_self + nxt, adv)

    starts = np.flatnonzero(net.start)
    start_scores = v[0, starts]
    best = float(np.max(start_scores))
    if not np.isfinite(best):
        return NEG_INF, np.zeros(0, dtype=np.int64)
    path = np.empty(n_frames, dtype=np.int64)
    path[0] = starts[np.flatnonzero(start_scores >= best - _tie_tol(best))[-1]]
    for t in range(n_frames - 1):
        j = path[t]
        nxt = v[t + 1]
        targets = list(succ[j][net.succ_mask[j]]) + [j]
        scores = np.array([net.log_next[j] + nxt[k] for k in targets[:-1]] + [log_self[j] + nxt[j]])
        top = scores.max()
        path[t + 1] = targets[int(np.flatnonzero(scores >= top - _tie_tol(top))[0])]
    return best, path


def _tie_tol(score: float) -> float:
    # Paths equal in exact arithmetic (e.g. repeated one-state units) differ by rounding only.
    return TIE_RTOL * (1.0 + abs(score))


@dataclass
class Posteriors:
    log_likelihood: float
    gamma: np.ndarray  # (N, n_states) state occupancy
    n_self: np.ndarray  # (n_states,) expected self-loop count
    n_advance: np.ndarray  # (n_states,) expected forward-arc + exit count


def forward_backward(net: LineNetwork, emis: np.ndarray) -> Posteriors:
    n_frames, n_states = emis.shape
    alpha = np.empty_like(emis)
    alpha[0] = np.where(net.start, emis[0], NEG_INF)
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        inc = _lse(prev[net.pred] + net.pred_logp, axis=1)
        alpha[t] = emis[t] + np.logaddexp(prev + net.log_self, inc)
    beta = np.empty_like(emis)
    beta[-1] = net.exit
    for t in range(n_frames - 2, -1, -1):
        m = emis[t + 1] + beta[t + 1]
        beta[t] = np.logaddexp(net.log_self + m, _lse(net.succ_logp + m[net.succ], axis=1))
    total = float(_lse(alpha[-1] + net.exit, axis=0))
    if not np.isfinite(total):
        return Posteriors(total, np.zeros_like(emis), np.zeros(n_states), np.zeros(n_states))
    gamma = np.exp(alpha + beta - total)
    if n_frames > 1:
        a = alpha[:-1]
        m = emis[1:] + beta[1:]
        n_self = np.exp(a + net.log_self + m - total).sum(axis=0)
        adv = np.exp(a[:, :, None] + net.succ_logp[None] + m[:, net.succ] - total)
        n_adv = adv.sum(axis=(0, 2))
    else:
        n_self = np.zeros(n_states)
        n_adv = np.zeros(n_states)
    n_adv = n_adv + np.exp(alpha[-1] + net.exit - total)
    return Posteriors(total, gamma, n_self, n_adv)
