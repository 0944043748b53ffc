"""Energy-ratio SDR, scale-invariant SDR and per-articulation-category SDR."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MetricError
from .lexicon import MANNER_ORDER, MannerClass

CAP_DB = 300.0
_TINY = 1e-30


def _pair(estimate, reference):
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64).ravel()
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise MetricError(f"length mismatch: estimate {est.size} vs reference {ref.size}")
    return est, ref


def _ratio_db(num: float, den: float) -> float:
    if den < _TINY:
        return math.inf
    return 10.0 * math.log10(num / den)


def sdr(estimate, reference) -> float:
    """``10 log10(|s|^2 / |s - s_hat|^2)``; ``inf`` when the residual vanishes."""
    est, ref = _pair(estimate, reference)
    energy = float(np.dot(ref, ref))
    if energy < _TINY:
        raise MetricError("reference has zero energy")
    err = ref - est
    return _ratio_db(energy, float(np.dot(err, err)))


def si_sdr(estimate, reference) -> float:
    est, ref = _pair(estimate, reference)
    est = est - est.mean()
    ref = ref - ref.mean()
    energy = float(np.dot(ref, ref))
    if energy < _TINY:
        raise MetricError("reference has zero energy")
    target = (np.dot(est, ref) / energy) * ref
    noise = est - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(noise, noise)))


def capped(value: float, cap: float = CAP_DB) -> float:
    return min(value, cap)


def category_mask(n_samples: int, sample_rate: int, alignments, categories) -> np.ndarray:
    """Boolean keep-mask over samples covered by tokens of ``categories`` (rectangular edges)."""
    cats = {str(getattr(c, "value", c)) for c in ([categories] if isinstance(categories, (str, MannerClass)) else categories)}
    keep = np.zeros(n_samples, bool)
    for r in alignments:
        if str(r["manner"]) in cats:
            a = max(0, int(round(r["start_s"] * sample_rate)))
            b = min(n_samples, int(round(r["end_s"] * sample_rate)))
            keep[a:b] = True
    return keep


def per_category_sdr(estimate, reference, alignments, category, sample_rate: int):
    """SDR over the utterance after muting everything outside ``category``'s tokens.

    The same mute mask is applied to estimate and reference. Returns ``None``
    when the category has no aligned samples.
    """
    est, ref = _pair(estimate, reference)
    keep = category_mask(ref.size, sample_rate, alignments, category)
    if not keep.any():
        return None
    return sdr(np.where(keep, est, 0.0), np.where(keep, ref, 0.0))


@dataclass
class EvalResult:
    utt_id: str
    sdr_db: float
    sisdr_db: float
    per_category: dict[str, float] = field(default_factory=dict)


def evaluate_utterance(utt_id, estimate, reference, alignments, sample_rate: int) -> EvalResult:
    per = {}
    for c in MANNER_ORDER:
        v = per_category_sdr(estimate, reference, alignments, c, sample_rate)
        if v is not None:
            per[c.value] = v
    return EvalResult(utt_id, sdr(estimate, reference), si_sdr(estimate, reference), per)


def evaluate_corpus(estimates: dict, references: dict, alignments: dict, sample_rate: int):
    """Per-utterance results and arithmetic means of (capped) dB values.

    Category means average over the utterances in which the category occurs.
    """
    if set(estimates) != set(references):
        raise MetricError("estimate and reference utterance ids differ")
    results = [evaluate_utterance(u, estimates[u], references[u], alignments.get(u, []), sample_rate)
               for u in sorted(estimates)]
    return results, corpus_means(results)


def corpus_means(results) -> dict:
    if not results:
        return {"sdr_db": None, "sisdr_db": None, "per_category": {}}
    means = {
        "sdr_db": float(np.mean([capped(r.sdr_db) for r in results])),
        "sisdr_db": float(np.mean([capped(r.sisdr_db) for r in results])),
        "per_category": {},
    }
    for c in MANNER_ORDER:
        vals = [capped(r.per_category[c.value]) for r in results if c.value in r.per_category]
        if vals:
            means["per_category"][c.value] = float(np.mean(vals))
    return means


def category_shares(alignments_by_utt: dict) -> dict[str, float]:
    """Fraction of total aligned duration per category, in percent."""
    dur = {c.value: 0.0 for c in MANNER_ORDER}
    for recs in alignments_by_utt.values():
        for r in recs:
            dur[str(r["manner"])] += r["end_s"] - r["start_s"]
    total = sum(dur.values())
    return {k: (100.0 * v / total if total else 0.0) for k, v in dur.items()}


def write_results_csv(path, results, meta: dict | None = None) -> None:
    cols = [c.value for c in MANNER_ORDER]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n")
        w = csv.writer(fh)
        w.writerow(["utt", "sdr", "sisdr", *cols])
        for r in results:
            row = [r.utt_id, f"{capped(r.sdr_db):.4f}", f"{capped(r.sisdr_db):.4f}"]
            row += [f"{capped(r.per_category[c]):.4f}" if c in r.per_category else "" for c in cols]
            w.writerow(row)
