"""GMM-HMM training and Viterbi forced alignment of manner-of-articulation tokens."""
from .hmm import GmmHmm, GmmHmmSet
from .train import TrainLine, flat_start, log_likelihood, train_em, two_stage_fa
from .viterbi import (FRAME_PERIOD, AlignmentResult, TokenAlignment, align_line, forced_align,
                      global_to_line, line_to_global)

__all__ = [
    "FRAME_PERIOD", "AlignmentResult", "GmmHmm", "GmmHmmSet", "TokenAlignment", "TrainLine",
    "align_line", "flat_start", "forced_align", "global_to_line", "line_to_global",
    "log_likelihood", "train_em", "two_stage_fa",
]
