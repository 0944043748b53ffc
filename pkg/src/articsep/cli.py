"""Command-line pipeline: alignment, knowledge vectors, chunk mixing, separator training, inference, evaluation.

Every command reads an optional TOML config (``--config``), applies
``--set section.key=value`` overrides on top, and writes artifacts under the
configured output directory so that commands compose without extra glue::

    articsep make-toy --out toy
    articsep pipeline --set dataset=toy --set out=runs/toy
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .align import GmmHmmSet, TrainLine, flat_start, line_to_global, train_em, two_stage_fa
from .align.train import align_corpus, log_likelihood
from .dsp import AudioClip, MfccConfig, mfcc, n_stft_frames, read_wav, stft, write_wav
from .errors import ArticsepError, ConfigurationError, FormatError, OOVError
from .formats import artifact_meta, read_jsonl, write_json, write_jsonl
from .knowledge import FrameGrid, Projector, rasterize, save_matrix, shift_records, va_from_script
from .lexicon import N_MANNER, SIL, Lexicon, text_to_manner_tokens
from .metrics import category_shares, evaluate_corpus, write_results_csv
from .mixer import MixSpec, eval_segments, load_split, sample_chunks
from .separator import (Example, RefNet, TrainConfig, extract, fit, load_checkpoint,
                        save_checkpoint)

log = logging.getLogger("articsep")

DEFAULTS = {
    "dataset": "toy",
    "lexicon": "",
    "seed": 0,
    "out": "runs/default",
    "oov": "error",
    "align": {"em_iters": 8, "refine_iters": 2, "refine_em_iters": 3, "n_mix": 4,
              "allow_sil": False, "train_source": "speech", "test_source": "mix"},
    "mix": {"n_chunks": 24, "chunk_s": 6.0, "p_direct": 0.25, "p_drop_music": 0.2,
            "p_drop_fx": 0.2, "gain_low": 0.7, "gain_high": 1.3},
    "sep": {"steps": 60, "batch_size": 4, "hidden": 64, "learning_rate": 1e-3,
            "va_mode": "selection_only", "use_knowledge": True, "compression": "log1p"},
    "plot": {"bin_step": 8, "frame_step": 4},
}


# ------------------------------------------------------------------ config


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            cfg = _merge(cfg, tomllib.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"{key}: {p} is not a section")
        node[parts[-1]] = _parse_value(value.strip())
    return cfg


class Run:
    """Resolved configuration plus path conventions shared by all commands."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.root = Path(cfg["dataset"])
        self.out = Path(cfg["out"])
        self.meta = artifact_meta(cfg, self.seed)
        self._lexicon = None

    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def lexicon(self) -> Lexicon:
        if self._lexicon is None:
            lex = self.cfg.get("lexicon") or None
            if lex and not Path(lex).exists():
                raise ConfigurationError(f"lexicon {lex} not found")
            self._lexicon = Lexicon.load(lex)
        return self._lexicon

    def split(self, name: str):
        if not self.root.is_dir():
            raise ConfigurationError(f"dataset root {self.root} does not exist")
        return load_split(self.root, name)


# -------------------------------------------------------- alignment helpers


def _line_tokens(run: Run, text: str, line_id: str):
    try:
        return text_to_manner_tokens(text, run.lexicon)
    except OOVError:
        if run.cfg["oov"] == "skip":
            log.warning("dropping line %s: out-of-vocabulary words", line_id)
            return None
        raise


def _line_corpus(run: Run, utts, source: str, with_sil: bool = False):
    """Per-line (features, tokens) plus line bookkeeping ``(utt, line)``."""
    lines, info = [], []
    for utt in utts:
        clip = {"speech": utt.speech, "mix": utt.mixture}[source]
        sr = clip.sample_rate
        for ln in utt.script:
            tokens = _line_tokens(run, ln.text, ln.line_id)
            if not tokens:
                continue
            seg = clip.slice(int(round(ln.start_s * sr)), int(round(ln.end_s * sr)))
            lines.append(TrainLine(mfcc(seg).vectors, tokens, ln.line_id))
            info.append((utt.utt_id, ln))
        if with_sil:
            bounds = [0.0] + [x for ln in sorted(utt.script, key=lambda l: l.start_s)
                              for x in (ln.start_s, ln.end_s)] + [clip.duration]
            for k in range(0, len(bounds), 2):
                a, b = bounds[k], bounds[k + 1]
                if b - a >= 0.1:
                    seg = clip.slice(int(round(a * sr)), int(round(b * sr)))
                    lines.append(TrainLine(mfcc(seg).vectors, [SIL], f"{utt.utt_id}_sil{k // 2}"))
    return lines, info


def _records(results, info) -> list[dict]:
    recs = []
    for tokens, (utt_id, ln) in zip(results, info):
        recs.extend(line_to_global(tokens, ln.start_s, utt=utt_id))
    return recs


def _by_utt(records) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    for r in records:
        out.setdefault(r["utt"], []).append(r)
    return out


def _stamp(records, meta):
    return [dict(r, meta=meta) for r in records]


# ---------------------------------------------------------------- commands


def cmd_align_train(run: Run, args) -> Path:
    acfg = run.cfg["align"]
    utts = run.split("train")
    allow_sil = bool(acfg["allow_sil"])
    lines, _ = _line_corpus(run, utts, acfg["train_source"], with_sil=allow_sil)
    models = flat_start(lines, n_mix=int(acfg["n_mix"]), fingerprint=MfccConfig().fingerprint())
    models = train_em(models, lines, int(acfg["em_iters"]))
    out = Path(args.output) if getattr(args, "output", None) else run.path("model1.ahmm")
    models.save(out, meta=dict(run.meta, log_likelihoods=models.log_likelihoods))
    log.info("Model 1: %d lines, log-likelihood %s", len(lines), models.log_likelihoods[-1:])
    return out


def cmd_align(run: Run, args) -> Path:
    models = GmmHmmSet.load(args.model or run.path("model1.ahmm"))
    split = args.split
    source = args.source or (run.cfg["align"]["train_source"] if split == "train" else run.cfg["align"]["test_source"])
    lines, info = _line_corpus(run, run.split(split), source)
    results = [r.tokens for r in align_corpus(models, lines, bool(run.cfg["align"]["allow_sil"]))]
    out = Path(args.output) if args.output else run.path(f"align_{split}_{source}.jsonl")
    write_jsonl(out, _stamp(_records(results, info), run.meta))
    return out


def cmd_align_refine(run: Run, args) -> Path:
    acfg = run.cfg["align"]
    model1 = GmmHmmSet.load(args.model or run.path("model1.ahmm"))
    lines, info = _line_corpus(run, run.split(args.split), acfg["test_source"])
    iters = int(args.iters if args.iters is not None else acfg["refine_iters"])
    allow_sil = bool(acfg["allow_sil"])
    model2, results = two_stage_fa(model1, lines, iters, int(acfg["refine_em_iters"]), allow_sil)
    ll1 = log_likelihood(model1, lines)
    ll2 = log_likelihood(model2, lines)
    model2.save(run.path("model2.ahmm"), meta=dict(run.meta, mixture_ll_model1=ll1[0], mixture_ll_model2=ll2[0]))
    out = run.path(f"align_{args.split}_2stage.jsonl")
    write_jsonl(out, _stamp(_records(results, info), run.meta))
    return out


def _grid(n_samples: int, sample_rate: int) -> FrameGrid:
    return FrameGrid(n_stft_frames(n_samples), sample_rate=sample_rate)


def cmd_vectors(run: Run, args) -> Path:
    recs = _by_utt(read_jsonl(args.alignments))
    outdir = run.path(f"vectors_{args.split}")
    manifest = []
    for utt in run.split(args.split):
        grid = _grid(utt.n_samples, utt.sample_rate)
        mat = rasterize(recs.get(utt.utt_id, []), grid)
        if run.cfg["sep"]["va_mode"] == "extra_dim":
            mat = va_from_script(utt.script, grid, "extra_dim", mat)
        save_matrix(outdir / f"{utt.utt_id}.artf", mat)
        manifest.append({"utt": utt.utt_id, "frames": int(mat.shape[0]), "active": int(mat[:, :N_MANNER].sum())})
    write_json(outdir / "manifest.json", {"meta": run.meta, "utterances": manifest})
    return outdir


def _chunk_matrix(run: Run, records, offset_s: float, n_samples: int, sr: int, script=None) -> np.ndarray:
    grid = _grid(n_samples, sr)
    mat = rasterize(shift_records(records, offset_s), grid)
    if run.cfg["sep"]["va_mode"] == "extra_dim":
        shifted = [{"start_s": max(0.0, ln.start_s - offset_s), "end_s": ln.end_s - offset_s}
                   for ln in (script or []) if ln.end_s - offset_s > 0]
        mat = va_from_script(shifted, grid, "extra_dim", mat)
    return mat


def cmd_mix(run: Run, args) -> Path:
    mcfg = run.cfg["mix"]
    spec = MixSpec(float(mcfg["p_direct"]), float(mcfg["p_drop_music"]), float(mcfg["p_drop_fx"]),
                   float(mcfg["gain_low"]), float(mcfg["gain_high"]), float(mcfg["chunk_s"]), run.seed)
    utts = run.split("train")
    scripts = {u.utt_id: u.script for u in utts}
    align_path = Path(args.alignments) if args.alignments else run.path("align_train_speech.jsonl")
    recs = _by_utt(read_jsonl(align_path)) if align_path.exists() else {}
    n = int(args.n if args.n is not None else mcfg["n_chunks"])
    outdir = run.path("chunks")
    provs = []
    for mixture, target, prov in sample_chunks(utts, spec, n):
        stem = f"chunk_{prov['draw']:05d}"
        write_wav(outdir / f"{stem}_mix.wav", mixture)
        write_wav(outdir / f"{stem}_target.wav", target)
        offset_s = prov["speech_offset"] / mixture.sample_rate
        a = prov["speech_utt"]
        save_matrix(outdir / f"{stem}.artf",
                    _chunk_matrix(run, recs.get(a, []), offset_s, len(mixture), mixture.sample_rate, scripts[a]))
        provs.append(dict(prov, chunk=stem, meta=run.meta))
    write_jsonl(outdir / "provenance.jsonl", provs)
    return outdir


def _load_chunks(chunkdir: Path, use_knowledge: bool):
    from .knowledge import load_matrix

    examples = []
    for prov in read_jsonl(chunkdir / "provenance.jsonl"):
        stem = prov["chunk"]
        mix = read_wav(chunkdir / f"{stem}_mix.wav")
        tgt = read_wav(chunkdir / f"{stem}_target.wav")
        mat = load_matrix(chunkdir / f"{stem}.artf").astype(np.float64)
        if not use_knowledge:
            mat = np.zeros_like(mat)
        examples.append(Example.from_audio(mix, tgt, mat))
    return examples


def cmd_sep_train(run: Run, args) -> Path:
    scfg = run.cfg["sep"]
    use_knowledge = bool(scfg["use_knowledge"])
    examples = _load_chunks(Path(args.chunks) if args.chunks else run.path("chunks"), use_knowledge)
    if not examples:
        raise FormatError("no training chunks found")
    cfg = TrainConfig(chunk_seconds=float(run.cfg["mix"]["chunk_s"]), batch_size=int(scfg["batch_size"]),
                      steps=int(scfg["steps"]), learning_rate=float(scfg["learning_rate"]), seed=run.seed,
                      hidden=int(scfg["hidden"]), compression=scfg["compression"])
    d = examples[0].mix_mag.shape[1]
    m = examples[0].artic.shape[1]
    model = RefNet(d, cfg.hidden, seed=run.seed)
    proj = Projector.init(m, d, seed=run.seed + 1)
    rows = []
    fit(model, proj, examples, cfg, log=lambda step, value: rows.append((step, value)))
    out = run.path("separator.asep")
    save_checkpoint(out, model, proj, cfg, meta=dict(run.meta, use_knowledge=use_knowledge))
    with open(run.path("train_log.csv"), "w", newline="") as fh:
        fh.write(f"# config_hash={run.meta['config_hash']} seed={run.seed} version={__version__}\n")
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((s, f"{v:.10g}") for s, v in rows)
    return out


def cmd_separate(run: Run, args) -> Path:
    model, proj, cfg = load_checkpoint(args.checkpoint or run.path("separator.asep"))
    align_path = Path(args.alignments) if args.alignments else run.path(f"align_{args.split}_2stage.jsonl")
    recs = _by_utt(read_jsonl(align_path)) if align_path.exists() else {}
    use_knowledge = bool(run.cfg["sep"]["use_knowledge"])
    outdir = run.path(f"estimates_{args.split}")
    manifest = []
    for utt in run.split(args.split):
        sr = utt.sample_rate
        est = np.zeros(utt.n_samples)
        for a, b in eval_segments(utt, float(run.cfg["mix"]["chunk_s"])):
            i0, i1 = int(round(a * sr)), int(round(b * sr))
            piece = utt.mixture.slice(i0, i1)
            mat = _chunk_matrix(run, recs.get(utt.utt_id, []), i0 / sr, len(piece), sr, utt.script)
            if not use_knowledge:
                mat = np.zeros_like(mat)
            est[i0:i1] = extract(model, piece, mat, proj, cfg.chunk_seconds, cfg.compression).samples
        write_wav(outdir / f"{utt.utt_id}.wav", AudioClip(est, sr))
        manifest.append(utt.utt_id)
    write_json(outdir / "manifest.json", {"meta": run.meta, "utterances": manifest})
    return outdir


def cmd_eval(run: Run, args) -> Path:
    estdir = Path(args.estimates) if args.estimates else run.path(f"estimates_{args.split}")
    utts = run.split(args.split)
    align_path = Path(args.alignments) if args.alignments else run.path(f"align_{args.split}_2stage.jsonl")
    recs = _by_utt(read_jsonl(align_path)) if align_path.exists() else {}
    estimates, references = {}, {}
    for utt in utts:
        references[utt.utt_id] = utt.speech
        estimates[utt.utt_id] = read_wav(estdir / f"{utt.utt_id}.wav") if not args.reference_as_estimate else utt.speech
    sr = utts[0].sample_rate if utts else 44100
    results, means = evaluate_corpus(estimates, references, recs, sr)
    outdir = run.path(f"eval_{args.split}")
    write_results_csv(outdir / "results.csv", results, run.meta)
    write_json(outdir / "summary.json", {
        "meta": run.meta, "means": means, "category_share_pct": category_shares(recs),
        "utterances": [{"utt": r.utt_id, "sdr_db": min(r.sdr_db, 300.0), "sisdr_db": min(r.sisdr_db, 300.0),
                        "per_category": {k: min(v, 300.0) for k, v in r.per_category.items()}} for r in results],
    })
    return outdir


def cmd_plot_align(run: Run, args) -> Path:
    utt = next((u for u in run.split(args.split) if u.utt_id == args.utt), None)
    if utt is None:
        raise FormatError(f"utterance {args.utt} not in split {args.split}")
    pcfg = run.cfg["plot"]
    spec = stft(utt.mixture)
    logmag = np.log(spec.magnitude() + 1e-8)
    times = spec.frame_times()
    outdir = run.path("plots")
    outdir.mkdir(parents=True, exist_ok=True)
    fs, bs = int(pcfg["frame_step"]), int(pcfg["bin_step"])
    with open(outdir / f"{utt.utt_id}_spec.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={run.meta['config_hash']} seed={run.seed} version={__version__}\n")
        w = csv.writer(fh)
        w.writerow(["time_s", "bin", "log_mag"])
        for n in range(0, spec.n_frames, fs):
            for k in range(0, spec.n_bins, bs):
                w.writerow([f"{times[n]:.5f}", k, f"{logmag[n, k]:.4f}"])
    sources = {"1-stage": args.align1 or run.path(f"align_{args.split}_{run.cfg['align']['test_source']}.jsonl"),
               "2-stage": args.align2 or run.path(f"align_{args.split}_2stage.jsonl"),
               "oracle": run.root / args.split / utt.utt_id / "oracle_align.jsonl"}
    with open(outdir / f"{utt.utt_id}_bounds.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={run.meta['config_hash']} seed={run.seed} version={__version__}\n")
        w = csv.writer(fh)
        w.writerow(["source", "line", "i", "manner", "start_s", "end_s"])
        for name, path in sources.items():
            if not Path(path).exists():
                continue
            for r in read_jsonl(path):
                if r["utt"] == utt.utt_id:
                    w.writerow([name, r["line"], r["i"], r["manner"], f"{r['start_s']:.4f}", f"{r['end_s']:.4f}"])
    return outdir


def cmd_make_toy(run: Run, args) -> Path:
    from .toy import make_toy_corpus

    return make_toy_corpus(args.out_dir, n_utts=args.n, seed=run.seed)


def cmd_pipeline(run: Run, args) -> Path:
    ns = argparse.Namespace
    cmd_align_train(run, ns(output=None))
    cmd_align(run, ns(model=None, split="train", source="speech", output=None))
    cmd_align(run, ns(model=None, split="test", source="mix", output=None))
    cmd_align_refine(run, ns(model=None, split="test", iters=None))
    cmd_vectors(run, ns(split="test", alignments=run.path("align_test_2stage.jsonl")))
    cmd_mix(run, ns(n=None, alignments=None))
    cmd_sep_train(run, ns(chunks=None))
    cmd_separate(run, ns(checkpoint=None, split="test", alignments=None))
    cmd_eval(run, ns(estimates=None, split="test", alignments=None, reference_as_estimate=False))
    first = run.split("test")[0].utt_id
    cmd_plot_align(run, ns(utt=first, split="test", align1=None, align2=None))
    return run.out


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="articsep", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted for sections); flags win over the file")
    common.add_argument("--dataset", help="dataset root (same as --set dataset=...)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="worker cap (processing is single-process)")
    common.add_argument("--json-errors", action="store_true", help="print errors as JSON on stderr")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    add("align-train", cmd_align_train, "flat start + EM on clean speech (Model 1)").add_argument("--output")
    sp = add("align", cmd_align, "forced-align a split")
    sp.add_argument("--model")
    sp.add_argument("--split", default="test")
    sp.add_argument("--source", choices=["mix", "speech"])
    sp.add_argument("--output")
    sp = add("align-refine", cmd_align_refine, "2-stage FA: pseudo-label retraining on mixtures (Model 2)")
    sp.add_argument("--model")
    sp.add_argument("--split", default="test")
    sp.add_argument("--iters", type=int)
    sp = add("vectors", cmd_vectors, "rasterize alignments into articulation matrices")
    sp.add_argument("--alignments", required=True)
    sp.add_argument("--split", default="test")
    sp = add("mix", cmd_mix, "sample training chunks")
    sp.add_argument("--n", type=int)
    sp.add_argument("--alignments")
    add("sep-train", cmd_sep_train, "train the mask estimator").add_argument("--chunks")
    sp = add("separate", cmd_separate, "extract speech from a split")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test")
    sp.add_argument("--alignments")
    sp = add("eval", cmd_eval, "SDR / SiSDR / per-category SDR")
    sp.add_argument("--estimates")
    sp.add_argument("--split", default="test")
    sp.add_argument("--alignments")
    sp.add_argument("--reference-as-estimate", action="store_true",
                    help="score the clean speech stem itself (metric sanity check)")
    sp = add("plot-align", cmd_plot_align, "emit spectrogram + boundary CSVs for one utterance")
    sp.add_argument("--utt", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--align1")
    sp.add_argument("--align2")
    sp = add("make-toy", cmd_make_toy, "write the synthetic toy corpus")
    sp.add_argument("out_dir")
    sp.add_argument("--n", type=int, default=10)
    add("pipeline", cmd_pipeline, "run every stage end to end")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        for key in ("dataset", "out", "seed"):
            if getattr(args, key) is not None:
                overrides.append(f"{key}={json.dumps(getattr(args, key))}")
        run = Run(load_config(args.config, overrides))
        result = args.func(run, args)
        if result is not None:
            print(result)
        return 0
    except ArticsepError as exc:
        return _fail(args, type(exc).__name__, str(exc), exc.exit_code)
    except (FileNotFoundError, KeyError) as exc:
        return _fail(args, type(exc).__name__, str(exc), 3)
    except FloatingPointError as exc:
        return _fail(args, type(exc).__name__, str(exc), 4)


def _fail(args, kind: str, message: str, code: int) -> int:
    if getattr(args, "json_errors", False):
        sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"articsep: {kind}: {message}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
