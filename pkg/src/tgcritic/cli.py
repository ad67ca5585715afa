"""Command-line workflows: feature extraction, training, scoring, the
annotation loop, and a self-check.

Exit codes: 0 success, 1 input error, 2 runtime/numeric failure. Every
artifact embeds the master seed and a digest of the configuration that
produced it. TGC_THREADS caps the extraction worker pool.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn
from .annotate import LOOP_SCHEDULE, run_loop
from .audio import (
    AudioClip,
    ClipTooShortError,
    MalformedWavError,
    UnsupportedCodecError,
    load_wav,
    resample,
    write_wav,
)
from .corpus import (
    LABEL_TO_INDEX,
    LabeledSample,
    load_manifest,
    save_manifest,
    synth_corpus,
)
from .cqt import CqtParams, ShortClipError, build_kernels, compute_cqt, save_cqt_cache
from .features import FeatureStore, extract_features
from .model import ModelConfig, TgCritic, load_model, save_model, song_probs
from .timbre import StubEmbedder, save_timbre_vector_json
from .training import (
    TrainingExample,
    metrics,
    one_step_schedule,
    predict_probs,
    train,
    two_step_schedule,
    weighted_score,
    write_log_csv,
)


class UserError(Exception):
    """Bad input from the caller; maps to exit code 1."""


_INPUT_ERRORS = (
    UserError,
    FileNotFoundError,
    MalformedWavError,
    UnsupportedCodecError,
    ClipTooShortError,
    ShortClipError,
    json.JSONDecodeError,
)


def _worker_count() -> int:
    env = os.environ.get("TGC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _config_digest(config: ModelConfig) -> str:
    return hashlib.sha256(config.to_json().encode()).hexdigest()[:12]


def _params_digest(params: CqtParams) -> str:
    return hashlib.sha256(params.digest().encode()).hexdigest()[:12]


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_clip(path) -> AudioClip:
    return resample(load_wav(path), 16000)


def _stamp(seed, digest) -> dict:
    return {"seed": seed, "config_digest": digest}


# -- extract -------------------------------------------------------------------


def cmd_extract(args) -> int:
    samples = load_manifest(args.manifest)
    if not samples:
        raise UserError(f"manifest is empty: {args.manifest}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = CqtParams()
    bank = build_kernels(params)
    provider = StubEmbedder()
    pdigest = _params_digest(params)

    index_path = out_dir / "cache_index.json"
    index = json.loads(index_path.read_text()) if index_path.is_file() else {}

    def is_cached(sample):
        entry = index.get(sample.sample_id)
        if entry is None or entry.get("params") != pdigest or args.force:
            return False
        cqt_ok = (out_dir / f"{sample.sample_id}.cqt").is_file()
        tv_ok = (out_dir / f"{sample.sample_id}.timbre.json").is_file()
        if not (cqt_ok and tv_ok):
            return False
        mtime = os.path.getmtime(sample.audio_path)
        if entry.get("mtime") == mtime:
            return True
        return entry.get("content") == _file_hash(sample.audio_path)

    def process(sample):
        if sample.audio_path is None:
            raise UserError(f"{sample.sample_id}: manifest row has no audio_path")
        if is_cached(sample):
            return sample.sample_id, "cached", None
        clip = _load_clip(sample.audio_path)
        cqt, tv, missing = extract_features(clip, params, bank, provider)
        save_cqt_cache(out_dir / f"{sample.sample_id}.cqt", cqt)
        save_timbre_vector_json(
            out_dir / f"{sample.sample_id}.timbre.json",
            tv,
            meta={
                "sample_id": sample.sample_id,
                "timbre_missing": missing,
                "seed": args.seed,
                "params_digest": pdigest,
            },
        )
        index[sample.sample_id] = {
            "content": _file_hash(sample.audio_path),
            "mtime": os.path.getmtime(sample.audio_path),
            "params": pdigest,
        }
        return sample.sample_id, "extracted", None

    results, failures = [], []
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        futures = {pool.submit(process, s): s for s in samples}
        for fut, sample in futures.items():
            try:
                results.append(fut.result())
            except Exception as exc:  # per-file failures collected, not fatal
                failures.append({"sample_id": sample.sample_id, "error": str(exc)})

    index_path.write_text(json.dumps(index, indent=2, sort_keys=True))
    if failures:
        (out_dir / "errors.jsonl").write_text(
            "".join(json.dumps(f) + "\n" for f in failures)
        )
    done = sum(1 for _, status, _ in results if status == "extracted")
    cached = sum(1 for _, status, _ in results if status == "cached")
    print(f"extracted {done}, cache hits {cached}, failures {len(failures)}")
    return 1 if failures else 0


# -- train ---------------------------------------------------------------------


def _examples_from_manifest(samples, require_labels=True):
    params = CqtParams()
    bank = build_kernels(params)
    provider = StubEmbedder()
    examples = []
    for s in samples:
        if s.label is None:
            if require_labels:
                raise UserError(f"{s.sample_id}: training requires a label")
            continue
        if s.audio_path is None:
            raise UserError(f"{s.sample_id}: manifest row has no audio_path")
        clip = _load_clip(s.audio_path)
        cqt, tv, _ = extract_features(clip, params, bank, provider)
        if cqt.frames < 256:
            raise UserError(
                f"{s.sample_id}: clip too short for training "
                f"({cqt.frames} frames < 256)"
            )
        examples.append(
            TrainingExample(
                sample_id=s.sample_id,
                cqt_values=cqt.values.astype(np.float32),
                timbre=tv.vector,
                label=LABEL_TO_INDEX[s.label],
            )
        )
    return examples


def cmd_train(args) -> int:
    samples = load_manifest(args.manifest)
    if not samples:
        raise UserError(f"manifest is empty: {args.manifest}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.config:
        config = ModelConfig.from_json(Path(args.config).read_text())
        config = replace(config, seed=args.seed)
    else:
        config = ModelConfig(seed=args.seed)
    digest = _config_digest(config)

    maker = one_step_schedule if args.strategy == "one_step" else two_step_schedule
    schedule = maker(scale_factor=args.scale, master_seed=args.seed, dtype=args.dtype)

    examples = _examples_from_manifest(samples)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(examples))
    n_val = max(1, len(examples) // 5) if len(examples) >= 5 else 0
    val_idx = set(order[:n_val].tolist())
    train_examples = [ex for i, ex in enumerate(examples) if i not in val_idx]
    val_examples = [ex for i, ex in enumerate(examples) if i in val_idx]

    model = TgCritic(config, dtype=np.dtype(args.dtype))
    t0 = time.time()
    model, logs = train(model, train_examples, schedule)
    elapsed = time.time() - t0

    save_model(model, out_dir / "checkpoint", extra=_stamp(args.seed, digest))
    (out_dir / "config.json").write_text(config.to_json())
    write_log_csv(logs, out_dir / "training_log.csv")

    report = {}
    if val_examples:
        probs = predict_probs(model, val_examples)
        m = metrics(probs, [ex.label for ex in val_examples])
        report = m.to_json_dict()
    report.update(_stamp(args.seed, digest))
    report["train_seconds"] = round(elapsed, 3)
    report["n_train"] = len(train_examples)
    report["n_validation"] = len(val_examples)
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=2))
    print(
        f"trained {args.strategy} on {len(train_examples)} clips in {elapsed:.1f}s; "
        f"checkpoint at {out_dir / 'checkpoint'}"
    )
    return 0


# -- score ---------------------------------------------------------------------


def _score_clip(model, clip, params, bank, provider, seed, digest):
    cqt, tv, missing = extract_features(clip, params, bank, provider)
    if cqt.frames < 256:
        raise UserError(
            f"{clip.source_id}: need at least 8.192 s of audio "
            f"({cqt.frames} frames < 256)"
        )
    curve = model.evaluation_curve(cqt, tv)
    song = song_probs(curve)
    return {
        "source": clip.source_id,
        "curve": [
            {
                "start_s": round(start * cqt.hop_seconds, 6),
                "p_awesome": p.p_awesome,
                "p_mediocre": p.p_mediocre,
                "p_inferior": p.p_inferior,
            }
            for start, p in curve.points
        ],
        "song_probs": {
            "p_awesome": song.p_awesome,
            "p_mediocre": song.p_mediocre,
            "p_inferior": song.p_inferior,
        },
        "weighted_score": weighted_score(song),
        "timbre_missing": missing,
        **_stamp(seed, digest),
    }


def cmd_score(args) -> int:
    if bool(args.audio) == bool(args.manifest):
        raise UserError("provide exactly one of --audio or --manifest")
    model = load_model(args.checkpoint)
    digest = _config_digest(model.config)
    params = CqtParams()
    bank = build_kernels(params)
    provider = StubEmbedder()

    targets = []
    if args.audio:
        targets.append((Path(args.audio).stem, Path(args.audio)))
    else:
        for s in load_manifest(args.manifest):
            if s.audio_path is None:
                raise UserError(f"{s.sample_id}: manifest row has no audio_path")
            targets.append((s.sample_id, Path(s.audio_path)))
    if not targets:
        raise UserError("nothing to score")

    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for name, path in targets:
        report = _score_clip(
            model, _load_clip(path), params, bank, provider, args.seed, digest
        )
        text = json.dumps(report, indent=2)
        if out_dir is None:
            print(text)
        else:
            (out_dir / f"{name}.score.json").write_text(text)
    if out_dir is not None:
        print(f"scored {len(targets)} clip(s) into {out_dir}")
    return 0


# -- annotate ------------------------------------------------------------------


class _ManifestCorpus:
    """Adapter giving run_loop the corpus surface for on-disk manifests."""

    def __init__(self, seed_set, pool):
        self.seed_set = seed_set
        self.pool = pool
        self.hidden = None
        self._paths = {s.sample_id: s.audio_path for s in seed_set + pool}

    def audio(self, sample_id) -> AudioClip:
        return _load_clip(self._paths[sample_id])


def cmd_annotate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        corpus = synth_corpus(args.seed, n_seed=args.seed_size, n_pool=args.pool_size)
        save_manifest(corpus.seed_set, out_dir / "seed_manifest.jsonl")
        save_manifest(corpus.pool, out_dir / "pool_manifest.jsonl")
        if args.write_audio:
            audio_dir = out_dir / "audio"
            audio_dir.mkdir(exist_ok=True)
            for s in corpus.all_samples:
                write_wav(audio_dir / f"{s.sample_id}.wav", corpus.audio(s.sample_id))
    else:
        if not args.seed_manifest or not args.pool_manifest:
            raise UserError("--seed-manifest and --pool-manifest required (or --synthetic)")
        seed_set = load_manifest(args.seed_manifest)
        pool = load_manifest(args.pool_manifest)
        if any(s.label is None for s in seed_set):
            raise UserError("seed manifest must be fully labeled")
        corpus = _ManifestCorpus(seed_set, pool)

    schedule = replace(LOOP_SCHEDULE, scale_factor=args.scale)
    model_config = (
        ModelConfig.from_json(Path(args.config).read_text()) if args.config else None
    )
    from .annotate import default_trainer

    def trainer(labeled_pool, store, iteration, seed):
        return default_trainer(
            labeled_pool, store, iteration, seed,
            schedule=schedule, model_config=model_config,
        )

    result = run_loop(
        corpus,
        n_iterations=args.iterations,
        seed=args.seed,
        trainer=trainer,
        out_dir=out_dir,
        verbose=True,
    )
    if result.model is not None and hasattr(result.model, "params"):
        save_model(
            result.model,
            out_dir / "final_checkpoint",
            extra=_stamp(args.seed, _config_digest(result.model.config)),
        )
    print(f"annotation loop finished: {args.iterations} iteration(s) in {out_dir}")
    return 0


# -- selfcheck -----------------------------------------------------------------


def cmd_selfcheck(args) -> int:
    checks = []
    rng = np.random.default_rng(args.seed)

    def run_check(name, fn):
        t0 = time.time()
        try:
            detail = fn()
            ok = True
        except Exception as exc:
            detail = str(exc)
            ok = False
        checks.append(ok)
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name} ({time.time() - t0:.1f}s): {detail}")

    def op_grad_checks():
        worst = 0.0
        x = nn.Tensor(rng.standard_normal((6, 5, 2)))
        w = nn.Parameter(rng.standard_normal((3, 3, 2, 3)), "w")
        b = nn.Parameter(rng.standard_normal(3), "b")
        r = rng.standard_normal((6, 5, 3))
        worst = max(worst, nn.grad_check(
            lambda *a: nn.weighted_sum(nn.conv2d(*a), r), [x, w, b]))
        xd = nn.Tensor(rng.standard_normal(7))
        wd = nn.Parameter(rng.standard_normal((7, 4)), "wd")
        bd = nn.Parameter(rng.standard_normal(4), "bd")
        rd = rng.standard_normal(4)
        worst = max(worst, nn.grad_check(
            lambda *a: nn.weighted_sum(nn.dense(*a), rd), [xd, wd, bd]))
        if worst >= 1e-6:
            raise AssertionError(f"op gradient error {worst:.2e} >= 1e-6")
        return f"max op gradient error {worst:.2e} < 1e-6"

    def full_model_grad_check():
        model = TgCritic(ModelConfig(seed=args.seed))
        x = rng.standard_normal((256, 96, 1))
        tv = rng.standard_normal(512)

        def loss_fn(*ps):
            return nn.cross_entropy(model.forward_tensor(x, tv), 1)

        err = nn.grad_check(
            loss_fn, list(model.params.values()), sample=1,
            rng=np.random.default_rng(args.seed),
        )
        if err >= 1e-4:
            raise AssertionError(f"full-model gradient error {err:.2e} >= 1e-4")
        return f"full-model gradient error {err:.2e} < 1e-4"

    def shape_laws():
        params = CqtParams()
        bank = build_kernels(params)
        clip = AudioClip(rng.uniform(-0.5, 0.5, 131072), 16000, "shape")
        cqt = compute_cqt(clip, params, bank)
        assert cqt.frames == 257 and cqt.bins == 96, "T formula violated"
        model = TgCritic(ModelConfig(seed=args.seed))
        assert model.config.hr.final_bins * model.config.hr.fusion_channels == 768
        probs = model.forward(cqt.values[:256], rng.standard_normal(512))
        total = probs.p_awesome + probs.p_mediocre + probs.p_inferior
        assert abs(total - 1.0) < 1e-9, "probabilities do not sum to 1"
        hr_vec = model.hr_forward(rng.standard_normal((256, 96, 1)))
        tb_vec = model.timbre_forward(rng.standard_normal(512))
        assert hr_vec.shape == (64,) and tb_vec.shape == (64,)
        return "8.192s -> 257 frames; window 256x96; branch outputs 64+64; probs sum 1"

    def cqt_sine_check():
        params = CqtParams()
        bank = build_kernels(params)
        x = 0.5 * np.sin(2 * np.pi * 440.0 * np.arange(16000) / 16000)
        cqt = compute_cqt(AudioClip(x, 16000, "sine"), params, bank)
        half = bank.fft_len // 2 // params.hop
        argmax = cqt.values.argmax(axis=1)[half:cqt.frames - half]
        assert np.all(argmax == 58), f"argmax bins {sorted(set(argmax.tolist()))}"
        return "440 Hz sine peaks at bin 58 in all interior frames"

    def param_budget():
        count = TgCritic(ModelConfig(seed=args.seed)).param_count()
        lo, hi = int(0.82e6 * 0.8), int(0.82e6 * 1.2)
        assert lo <= count <= hi, f"{count} outside [{lo}, {hi}]"
        return f"{count} parameters within 0.82M +/- 20% [{lo}, {hi}]"

    run_check("layer-op gradient checks", op_grad_checks)
    run_check("full-model gradient check", full_model_grad_check)
    run_check("shape laws", shape_laws)
    run_check("CQT sine bin", cqt_sine_check)
    run_check("parameter budget", param_budget)
    if all(checks):
        print("selfcheck: all checks passed")
        return 0
    print("selfcheck: FAILURES detected")
    return 2


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tgcritic", description="Singing quality evaluation workflows"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute CQT + timbre features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="ignore the feature cache")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("train", help="train on a labeled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="model config JSON path")
    p.add_argument("--strategy", choices=("one_step", "two_step"), default="one_step")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=10, help="schedule divisor")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("score", help="score audio with a trained checkpoint")
    p.add_argument("--audio", help="single WAV file")
    p.add_argument("--manifest", help="JSONL manifest of clips")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="directory for per-clip score JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("annotate", help="run the iterative annotation loop")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="model config JSON for the in-loop network")
    p.add_argument("--seed-manifest")
    p.add_argument("--pool-manifest")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--seed-size", type=int, default=90)
    p.add_argument("--pool-size", type=int, default=900)
    p.add_argument("--write-audio", action="store_true")
    p.add_argument("--iterations", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=1, help="extra divisor on the loop schedule")
    p.set_defaults(fn=cmd_annotate)

    p = sub.add_parser("selfcheck", help="gradient, shape, CQT, and budget checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime/numeric failures
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
