"""Command-line entry point: ``almtok <command> ...``.

Every failure prints one JSON line ``{"error": ..., "message": ...}`` to stderr
and exits with status 2. Thread count comes from ``ALMTOK_NUM_THREADS``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import training as T
from .audio import AudioClip, load_audio, save_audio
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codestream import CodeStream, read_codestream, write_codestream
from .config import CodecConfig, load_config, save_config, toy_config
from .data import load_dir, synthetic_corpus, write_corpus
from .evaluation import evaluate
from .quantizer import (
    CodebookSet,
    bitrate,
    bitrate_table,
    build_layered_priors,
    load_codebooks,
    random_codebooks,
    save_codebooks,
    synthetic_priors,
)


class CliError(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, default=str))


def _read_matrix(path: str) -> np.ndarray:
    p = Path(path)
    try:
        arr = np.load(p) if p.suffix == ".npy" else np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None, ndmin=2)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot parse feature matrix {path}: {exc}") from exc
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise CliError(f"{path}: expected a finite 2-D real matrix, got shape {arr.shape}")
    return arr


def codebooks_for(cfg: CodecConfig, path: str | None = None, seed: int | None = None) -> CodebookSet:
    """Codebooks from a file, synthetic priors (semantic_prior on) or random (ablation)."""
    seed = cfg.seed if seed is None else seed
    if path:
        return load_codebooks(path)
    if cfg.semantic_prior:
        return synthetic_priors(cfg.codebook_size, cfg.vq_layers, cfg.d_vq, seed)
    return random_codebooks(cfg.codebook_size, cfg.vq_layers, cfg.d_vq, seed)


def _config(args) -> CodecConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else toy_config()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    return cfg.replace(**overrides) if overrides else cfg


def _model(path: str):
    ckpt = load_checkpoint(path)
    if ckpt.kind not in ("stage2", "single"):
        raise CliError(f"{path}: expected a stage-2 or single-stage checkpoint, got {ckpt.kind!r}")
    return T.codec_from_checkpoint(ckpt)


# --------------------------------------------------------------------------- commands


def cmd_kmeans_prior(args) -> None:
    if args.codebook_size % 2:
        raise CliError(f"codebook size must be even, got {args.codebook_size}")
    speech, sound = _read_matrix(args.speech_feats), _read_matrix(args.sound_feats)
    if speech.shape[1] != sound.shape[1]:
        raise CliError(f"column mismatch: speech has {speech.shape[1]}, sound has {sound.shape[1]}")
    books = build_layered_priors(speech, sound, args.codebook_size, args.layers, args.seed, args.iters)
    save_codebooks(books, args.out)
    _emit({"out": args.out, "layers": books.num_layers, "size": books.size, "dim": books.dim, "sha256": books.checksum()})


def cmd_train(args) -> None:
    cfg = _config(args)
    clips = load_dir(args.data)
    log = T.StepLogger(args.log or f"{args.out}.log.jsonl", append=bool(args.resume))
    resume = load_checkpoint(args.resume) if args.resume else None
    try:
        if args.stage == "1":
            ckpt = T.stage1_train(clips, cfg, resume=resume, stop_at=args.stop_at, log=log)
        else:
            one_stage = args.stage == "single"
            stage1 = load_checkpoint(args.stage1) if args.stage1 else None
            if stage1 is None and not one_stage and resume is None:
                raise CheckpointError("stage 2 requires a stage-1 checkpoint (--stage1 PATH)")
            if stage1 is not None and stage1.kind != "stage1":
                raise CheckpointError(f"{args.stage1}: expected a stage-1 checkpoint, got {stage1.kind!r}")
            if resume is not None:
                books = CodebookSet(T.codebook_table(resume).numpy())
            else:
                books = codebooks_for(cfg, args.codebooks)
            ckpt = T.stage2_train(clips, cfg, stage1, books, one_stage=one_stage, resume=resume, stop_at=args.stop_at, log=log)
    finally:
        log.close()
    save_checkpoint(ckpt, args.out)
    last = ckpt.history[-1] if ckpt.history else {}
    _emit({"out": args.out, "kind": ckpt.kind, "step": ckpt.step, "final": ckpt.step >= cfg.steps, "last": last, "checksum": ckpt.checksum()})


def cmd_encode(args) -> None:
    model = _model(args.model)
    cfg = model.cfg
    if args.window not in cfg.window_sizes:
        raise CliError(f"unsupported window {args.window}; configured set is {cfg.window_sizes}")
    clip = load_audio(args.inp)
    if clip.sample_rate != cfg.sample_rate:
        raise CliError(f"sample_rate mismatch: file has {clip.sample_rate}, model expects {cfg.sample_rate}")
    codes, n = model.encode(clip.tensor().float()[None], args.window)
    stream = CodeStream(cfg.sample_rate, cfg.patch_size, args.window, cfg.codebook_size, n, codes[0].numpy())
    write_codestream(stream, args.out)
    fps, tps, bps = bitrate(cfg, args.window)
    _emit({"out": args.out, "window": args.window, "queries": stream.num_queries, "fps": float(fps), "tps": float(tps), "bps": float(bps)})


def cmd_decode(args) -> None:
    model = _model(args.model)
    cfg = model.cfg
    stream = read_codestream(args.inp)
    stream.check_against(cfg.sample_rate, cfg.patch_size, cfg.vq_layers, cfg.codebook_size, cfg.window_sizes)
    codes = torch.as_tensor(stream.codes)[None]
    y = model.decode(codes, stream.window, stream.original_len)[0]
    save_audio(AudioClip(y.double().numpy().clip(-1.0, 1.0), cfg.sample_rate), args.out, args.encoding)
    _emit({"out": args.out, "samples": int(y.shape[-1]), "sample_rate": cfg.sample_rate})


def cmd_bitrate(args) -> None:
    cfg = load_config(args.config) if args.config else CodecConfig()
    windows = args.windows if args.windows else list(range(1, 11))
    for row in bitrate_table(cfg, windows):
        _emit({"window": row["window"], "fps": str(row["fps"]), "tps": str(row["tps"]), "bps": float(row["bps"]), "bps_exact": str(row["bps"])})


def cmd_eval(args) -> None:
    model = _model(args.model)
    report = evaluate(model, load_dir(args.data), args.window)
    if args.out:
        report.write(args.out)
    _emit({"out": args.out, "mel_loss": report.mel_loss, "stft_loss": report.stft_loss, "ar_accuracy": report.ar_accuracy})


def cmd_make_fixtures(args) -> None:
    clips = synthetic_corpus(args.clips, args.seconds, args.sample_rate, args.seed)
    paths = write_corpus(clips, args.out)
    _emit({"out": args.out, "clips": len(paths)})


def cmd_config(args) -> None:
    cfg = toy_config() if args.toy else CodecConfig()
    save_config(cfg, args.out)
    _emit({"out": args.out, "toy": args.toy})


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="almtok", description="Query-token audio codec tools.")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kmeans-prior", help="build frozen prior codebooks from feature matrices")
    k.add_argument("--speech-feats", required=True)
    k.add_argument("--sound-feats", required=True)
    k.add_argument("--codebook-size", type=int, default=2048)
    k.add_argument("--layers", type=int, default=3)
    k.add_argument("--iters", type=int, default=50)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_kmeans_prior)

    t = sub.add_parser("train", help="stage-1, stage-2 or single-stage training")
    t.add_argument("--stage", choices=["1", "2", "single"], required=True)
    t.add_argument("--config", help="YAML config (default: toy config)")
    t.add_argument("--data", required=True, help="directory of mono WAV clips")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--stage1", help="stage-1 checkpoint (required for --stage 2)")
    t.add_argument("--codebooks", help="codebook file (default: synthetic priors or random per config)")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--stop-at", type=int, help="stop early at this step and write a resumable checkpoint")
    t.add_argument("--log", help="JSON-lines step log (default: OUT.log.jsonl)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="WAV -> code stream")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--window", type=int, required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="code stream -> WAV")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--encoding", choices=["pcm16", "float32"], default="float32")
    d.set_defaults(func=cmd_decode)

    b = sub.add_parser("bitrate", help="fps / tps / bps per window size")
    b.add_argument("--config", help="YAML config (default: full-size defaults)")
    b.add_argument("--windows", type=int, nargs="+")
    b.set_defaults(func=cmd_bitrate)

    v = sub.add_parser("eval", help="objective metrics report")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out")
    v.add_argument("--window", type=int)
    v.set_defaults(func=cmd_eval)

    f = sub.add_parser("make-fixtures", help="write the synthetic tone corpus")
    f.add_argument("--out", required=True)
    f.add_argument("--clips", type=int, default=10)
    f.add_argument("--seconds", type=float, default=1.0)
    f.add_argument("--sample-rate", type=int, default=8000)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_make_fixtures)

    c = sub.add_parser("config", help="write a default config file")
    c.add_argument("--toy", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(int(os.environ.get("ALMTOK_NUM_THREADS", "1")))
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
