import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from articsep.align import (GmmHmmSet, TrainLine, align_line, flat_start, forced_align, global_to_line,
                            line_to_global, log_likelihood, train_em, two_stage_fa)
from articsep.align.network import LineNetwork, build_units, viterbi
from articsep.align.train import _floored_weights, align_corpus
from articsep.dsp import FrameFeatures, MfccConfig
from articsep.errors import AlignmentError, InitializationError, InputError
from articsep.lexicon import MANNER_ORDER, SIL, MannerClass

from synth import brute_force_align, make_model, make_set, random_set, sample_line

LABELS = [c.value for c in MANNER_ORDER]


# ------------------------------------------------------------ flat start


def test_flat_start_uniform_split():
    x = np.arange(10.0)[:, None]
    m = flat_start([TrainLine(x, ["VWL"])], classes=["VWL"], n_mix=1)["VWL"]
    np.testing.assert_allclose(m.means[:, 0, 0], [0.5, 2.5, 4.5, 6.5, 8.5])
    np.testing.assert_allclose(m.variances[:, 0, 0], 0.25)
    m4 = flat_start([TrainLine(x, ["VWL"])], classes=["VWL"], n_mix=4)["VWL"]
    np.testing.assert_allclose(m4.means[1, :, 0], 2.5 + np.linspace(-0.2, 0.2, 4) * 0.5)
    np.testing.assert_allclose(np.exp(m4.log_weights), 0.25)


def test_flat_start_variance_floor():
    x = np.r_[np.zeros(5), np.arange(5.0)][:, None]
    models = flat_start([TrainLine(x, ["NAS"])], classes=["NAS"], n_mix=1)
    floor = 1e-3 * x.var()
    np.testing.assert_allclose(models.var_floor, floor)
    np.testing.assert_allclose(models["NAS"].variances[0, 0], floor)
    models.check()


def test_flat_start_disjoint_classes():
    a = TrainLine(np.array([[1.0], [2.0], [6.0]]), ["NAS"])
    b = TrainLine(np.array([[-3.0], [-1.0], [-2.0]]), ["VWL"])
    models = flat_start([a, b], classes=["NAS", "VWL"], n_states=1, n_mix=1)
    np.testing.assert_allclose(models["NAS"].means[0, 0], [3.0])
    np.testing.assert_allclose(models["NAS"].variances[0, 0], [14 / 3])
    np.testing.assert_allclose(models["VWL"].means[0, 0], [-2.0])
    np.testing.assert_allclose(models["VWL"].variances[0, 0], [2 / 3])
    # two self loops, one advance: 2/3 clipped into [0.1, 0.9]
    np.testing.assert_allclose(np.exp(models["NAS"].log_trans[0]), [2 / 3, 1 / 3])


def test_flat_start_names_missing_classes():
    with pytest.raises(InitializationError, match="AFR"):
        flat_start([TrainLine(np.zeros((20, 2)), ["NAS", "VWL"])])


# ------------------------------------------------------------ EM


def test_floored_weights_is_constrained_optimum():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = rng.exponential(1.0, 5) * (rng.random(5) < 0.6)
        floor = 0.05
        w = _floored_weights(c, floor)
        assert abs(w.sum() - 1) < 1e-12 and np.all(w >= floor - 1e-15)
        obj = np.dot(c, np.log(w))
        for _ in range(200):
            v = floor + rng.dirichlet(np.ones(5)) * (1 - 5 * floor)
            assert np.dot(c, np.log(v)) <= obj + 1e-12


def test_zero_iterations_is_identity():
    rng = np.random.default_rng(1)
    truth = random_set(rng, ["NAS", "VWL"], 5, dim=2)
    lines = [TrainLine(sample_line(rng, truth, ["NAS", "VWL"])[0], ["NAS", "VWL"]) for _ in range(3)]
    m0 = flat_start(lines, classes=["NAS", "VWL"])
    m = train_em(m0, lines, 0)
    for lab in m0.labels:
        np.testing.assert_array_equal(m[lab].means, m0[lab].means)
        np.testing.assert_array_equal(m[lab].variances, m0[lab].variances)
        np.testing.assert_array_equal(m[lab].log_trans, m0[lab].log_trans)


def test_sample_from_model_is_near_fixed_point():
    rng = np.random.default_rng(2)
    # the MLE gain over the truth shrinks like n_params / (2 n_frames)
    truth = random_set(rng, ["NAS", "VWL"], 5, dim=1, spread=3.0)
    for m in truth.models.values():
        m.log_trans[:] = np.log([0.8, 0.2])
    lines = []
    for i in range(400):
        toks = [["NAS", "VWL"][j] for j in rng.integers(0, 2, 3)]
        lines.append(TrainLine(sample_line(rng, truth, toks)[0], toks))
    frames = sum(ln.features.shape[0] for ln in lines)
    m1 = train_em(truth, lines, 1, tol=-np.inf)
    gain = (m1.log_likelihoods[1] - m1.log_likelihoods[0]) / frames
    assert 0 <= gain < 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_em_monotone_with_silence(seed):
    rng = np.random.default_rng(seed)
    truth = random_set(rng, ["NAS", "VWL"], 5, dim=2, with_sil=True)
    lines = []
    for _ in range(10):
        toks = ["NAS", "VWL", "NAS"][: int(rng.integers(1, 4))]
        x, _ = sample_line(rng, truth, [SIL] + toks + [SIL])
        lines.append(TrainLine(x, toks))
    sil_lines = [TrainLine(sample_line(rng, truth, [SIL])[0], [SIL]) for _ in range(5)]
    m0 = flat_start(lines + sil_lines, classes=["NAS", "VWL", SIL], n_mix=2)
    m = train_em(m0, lines, 6, allow_sil=True, tol=-np.inf)
    frames = sum(ln.features.shape[0] for ln in lines)
    assert np.min(np.diff(m.log_likelihoods)) / frames >= -1e-6
    m.check()


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    truth = random_set(rng, ["NAS", "VWL"], 5, dim=3)
    lines = [TrainLine(sample_line(rng, truth, ["NAS", "VWL"])[0], ["NAS", "VWL"]) for _ in range(6)]
    a = train_em(flat_start(lines, classes=["NAS", "VWL"]), lines, 3)
    b = train_em(flat_start(lines, classes=["NAS", "VWL"]), lines, 3)
    for lab in a.labels:
        for f in ("means", "variances", "log_weights", "log_trans"):
            assert np.array_equal(getattr(a[lab], f), getattr(b[lab], f))
    assert [r.tokens for r in align_corpus(a, lines)] == [r.tokens for r in align_corpus(b, lines)]


# ------------------------------------------------------------ alignment


def test_single_token_spans_line():
    models = random_set(np.random.default_rng(0), ["VWL"], 5)
    out = forced_align(np.random.default_rng(1).normal(size=(17, 1)), [("VWL", "a")], models)
    assert [(a.start_frame, a.end_frame, a.phoneme) for a in out] == [(1, 17, "a")]


def test_two_token_toy_boundary():
    models = make_set({"NAS": make_model("NAS", np.zeros((5, 1))), "VWL": make_model("VWL", np.full((5, 1), 10.0))})
    x = np.r_[np.zeros(6), np.full(6, 10.0)]
    out = forced_align(x, ["NAS", "VWL"], models)
    assert [(a.start_frame, a.end_frame) for a in out] == [(1, 6), (7, 12)]
    score, bounds = brute_force_align(x, ["NAS", "VWL"], models)
    assert bounds == [(1, 6), (7, 12)]
    assert np.isclose(align_line(x, ["NAS", "VWL"], models).score, score)


def test_identical_models_are_exchangeable():
    rng = np.random.default_rng(3)
    base = make_model("NAS", rng.normal(size=(5, 2)), 1.0, 0.7)
    twin = make_model("VWL", base.means[:, 0], 1.0, 0.7)
    other = make_model("STP", rng.normal(size=(5, 2)), 1.0, 0.5)
    models = make_set({"NAS": base, "VWL": twin, "STP": other})
    x = rng.normal(size=(25, 2))
    s1 = align_line(x, ["NAS", "STP", "VWL"], models).score
    s2 = align_line(x, ["VWL", "STP", "NAS"], models).score
    assert s1 == pytest.approx(s2, abs=1e-9)


@pytest.mark.parametrize("seed", range(40))
def test_silence_paths_match_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    models = random_set(rng, ["NAS", "VWL"], 2, dim=1, with_sil=True)
    tokens = [["NAS", "VWL"][int(i)] for i in rng.integers(0, 2, int(rng.integers(1, 3)))]
    n = int(rng.integers(2 * len(tokens), 11))
    x = rng.normal(0, 3, (n, 1))
    res = align_line(x, tokens, models, allow_sil=True)
    score, bounds = brute_force_align(x, tokens, models, allow_sil=True)
    assert np.isclose(res.score, score, rtol=1e-12, atol=1e-9)
    assert [(a.start_frame, a.end_frame) for a in res.tokens] == bounds


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_alignment_invariants(seed, allow_sil):
    rng = np.random.default_rng(seed)
    models = random_set(rng, LABELS, 5, dim=2, with_sil=True)
    toks = [LABELS[i] for i in rng.integers(0, 7, int(rng.integers(1, 6)))]
    n = 5 * len(toks) + int(rng.integers(0, 40))
    out = forced_align(rng.normal(size=(n, 2)), toks, models, allow_sil=allow_sil)
    assert [a.index for a in out] == list(range(1, len(toks) + 1))
    assert [a.manner for a in out] == toks
    for a, b in zip(out, out[1:]):
        assert a.end_frame < b.start_frame
        if not allow_sil:
            assert a.end_frame + 1 == b.start_frame
    for a in out:
        assert 1 <= a.start_frame and a.end_frame - a.start_frame + 1 >= 5 and a.end_frame <= n
    if not allow_sil:
        assert out[0].start_frame == 1 and out[-1].end_frame == n


def test_score_shift_keeps_segmentation():
    rng = np.random.default_rng(9)
    models = random_set(rng, LABELS, 5, dim=2)
    toks = ["NAS", "VWL", "FRC"]
    net = LineNetwork(build_units(toks), models)
    emis = net.emissions(rng.normal(size=(30, 2)))
    s0, p0 = viterbi(net, emis)
    s1, p1 = viterbi(net, emis + 3.5)
    assert np.array_equal(p0, p1)
    assert s1 == pytest.approx(s0 + 3.5 * 30)


def test_too_short_line():
    models = random_set(np.random.default_rng(0), ["NAS", "VWL"], 5)
    with pytest.raises(AlignmentError):
        forced_align(np.zeros((9, 1)), ["NAS", "VWL"], models)
    with pytest.raises(InputError):
        forced_align(np.zeros((9, 1)), [], models)


def test_feature_fingerprint_checked():
    models = random_set(np.random.default_rng(0), ["NAS"], 5, dim=39)
    models.fingerprint = MfccConfig().fingerprint()
    feats = FrameFeatures(np.zeros((10, 39)), MfccConfig(n_mels=40))
    with pytest.raises(InputError):
        forced_align(feats, ["NAS"], models)
    assert forced_align(FrameFeatures(np.zeros((10, 39))), ["NAS"], models)[0].end_frame == 10


# ------------------------------------------------------------ two-stage


def _corpus(rng, n_lines=12):
    truth = random_set(rng, ["NAS", "VWL", "FRC"], 5, dim=2, spread=3.0)
    lines = []
    for i in range(n_lines):
        toks = [["NAS", "VWL", "FRC"][j] for j in rng.integers(0, 3, int(rng.integers(2, 4)))]
        lines.append(TrainLine(sample_line(rng, truth, toks)[0], toks, f"l{i}"))
    return lines


def test_two_stage_composes():
    lines = _corpus(np.random.default_rng(4))
    m1 = train_em(flat_start(lines, classes=["NAS", "VWL", "FRC"], n_mix=2), lines, 3)
    both, _ = two_stage_fa(m1, lines, 2, em_iters=2)
    once, _ = two_stage_fa(m1, lines, 1, em_iters=2)
    twice, _ = two_stage_fa(once, lines, 1, em_iters=2)
    for lab in both.labels:
        np.testing.assert_array_equal(both[lab].means, twice[lab].means)
        np.testing.assert_array_equal(both[lab].log_trans, twice[lab].log_trans)


def test_two_stage_does_not_lower_likelihood():
    rng = np.random.default_rng(6)
    lines = _corpus(rng, 20)
    m1 = train_em(flat_start(lines, classes=["NAS", "VWL", "FRC"], n_mix=2), lines, 5)
    noisy = [TrainLine(ln.features + rng.normal(0, 2.0, ln.features.shape), ln.tokens) for ln in lines]
    m2, aligned = two_stage_fa(m1, noisy, 1, em_iters=3)
    assert log_likelihood(m2, noisy)[0] >= log_likelihood(m1, noisy)[0]
    assert len(aligned) == len(noisy)


# ------------------------------------------------------------ time bookkeeping


def test_line_to_global_examples():
    from articsep.align import TokenAlignment

    recs = line_to_global([TokenAlignment(1, "VWL", 1, 100, "a", "l0")], 3.0, utt="u")
    assert recs[0]["start_s"] == 3.0 and recs[0]["end_s"] == 4.0
    assert line_to_global([TokenAlignment(1, "VWL", 5, 100)], 0.0)[0]["end_s"] == 1.0
    with pytest.raises(InputError):
        line_to_global([], -1.0)


@given(st.lists(st.tuples(st.integers(1, 300), st.integers(0, 300)), min_size=1, max_size=8),
       st.floats(0, 600, allow_nan=False))
def test_global_line_round_trip(spans, start):
    from articsep.align import TokenAlignment

    toks, s = [], 1
    for i, (length, gap) in enumerate(spans, 1):
        toks.append(TokenAlignment(i, "NAS", s, s + length - 1, "m", "l"))
        s += length + gap
    back = global_to_line(line_to_global(toks, start))
    assert [(a.start_frame, a.end_frame) for a in back] == [(a.start_frame, a.end_frame) for a in toks]


def test_model_file_round_trip(tmp_path):
    models = random_set(np.random.default_rng(0), LABELS, 5, dim=3, with_sil=True)
    models.fingerprint = "abc"
    models.save(tmp_path / "m.ahmm", meta={"seed": 1})
    back = GmmHmmSet.load(tmp_path / "m.ahmm")
    assert back.fingerprint == "abc" and sorted(back.labels) == sorted(models.labels)
    for lab in models.labels:
        for f in ("means", "variances", "log_weights", "log_trans"):
            np.testing.assert_array_equal(getattr(back[lab], f), getattr(models[lab], f))
    assert back[MannerClass.NAS] is back["NAS"]
    assert (tmp_path / "m.ahmm").read_bytes()[:4] == b"AHMM"
