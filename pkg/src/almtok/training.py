"""Two-stage training: stage-1 MAE-augmented autoencoder, stage-2 adversarial codec."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import losses as L
from .audio import AudioClip
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    flatten_optimizer,
    load_into,
    restore_optimizer,
)
from .config import CodecConfig
from .model import ALMCodec, Stage1Autoencoder, apply_mask_batch, masked_count
from .quantizer import CodebookSet

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


# --------------------------------------------------------------------------- sampling


def sample_window(generator: torch.Generator, window_sizes: Sequence[int]) -> int:
    if not window_sizes:
        raise ValueError("window_sizes is empty")
    return int(window_sizes[int(torch.randint(len(window_sizes), (1,), generator=generator))])


def sample_rate_in(generator: torch.Generator, rate_range: tuple[float, float]) -> float:
    lo, hi = rate_range
    return lo + (hi - lo) * float(torch.rand(1, generator=generator, dtype=torch.float64))


def apply_mask(frames: torch.Tensor, rate_range: tuple[float, float], generator: torch.Generator):
    """Zero ceil(rate * T) distinct rows of a (T, d) frame matrix; rate ~ U(rate_range)."""
    rate = sample_rate_in(generator, rate_range)
    t = frames.shape[-2]
    n = masked_count(rate, t)
    mask = torch.zeros(t, dtype=torch.bool)
    if n:
        mask[torch.randperm(t, generator=generator)[:n]] = True
    return frames.masked_fill(mask.unsqueeze(-1), 0.0), mask, rate


# --------------------------------------------------------------------------- data


def as_tensors(dataset: Sequence[AudioClip | torch.Tensor | np.ndarray], sample_rate: int) -> list[torch.Tensor]:
    out = []
    for item in dataset:
        if isinstance(item, AudioClip):
            if item.sample_rate != sample_rate:
                raise ValueError(f"clip sample rate {item.sample_rate} != config sample_rate {sample_rate}")
            item = item.samples
        out.append(torch.as_tensor(np.asarray(item), dtype=torch.float32))
    if not out:
        raise ValueError("empty dataset")
    return out


def sample_batch(clips: list[torch.Tensor], batch_size: int, crop: int, generator: torch.Generator) -> torch.Tensor:
    rows = []
    for _ in range(batch_size):
        clip = clips[int(torch.randint(len(clips), (1,), generator=generator))]
        if clip.shape[0] <= crop:
            rows.append(torch.nn.functional.pad(clip, (0, crop - clip.shape[0])))
        else:
            start = int(torch.randint(clip.shape[0] - crop + 1, (1,), generator=generator))
            rows.append(clip[start : start + crop])
    return torch.stack(rows)


def fixed_batch(clips: list[torch.Tensor], crop: int) -> torch.Tensor:
    return torch.stack([torch.nn.functional.pad(c[:crop], (0, max(0, crop - c.shape[0]))) for c in clips])


# --------------------------------------------------------------------------- helpers


def _check_finite(value: torch.Tensor, step: int) -> None:
    if not torch.isfinite(value):
        raise TrainingDivergence(f"non-finite loss at step {step}")


def _tensors(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v.detach().clone() for k, v in module.state_dict().items()}


def _rng_tensor(gen: torch.Generator) -> torch.Tensor:
    return gen.get_state().clone()


def _adamw(params, cfg: CodecConfig, lr: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


class StepLogger:
    """Writes one JSON record per step; keys in LossReport.KEYS order after step metadata."""

    def __init__(self, path: str | Path | None = None, append: bool = False):
        self.fh = open(path, "a" if append else "w", encoding="utf-8") if path else None

    def __call__(self, record: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _record(step: int, report: L.LossReport, **extra) -> dict:
    rec = {"step": step, **extra}
    for k in L.LossReport.KEYS:
        rec[k] = getattr(report, k)
    return rec


@torch.no_grad()
def eval_recon_l1(model: nn.Module, clips: list[torch.Tensor], crop: int, w: int | None = None) -> float:
    """Time-domain L1 on a fixed, unmasked batch (clips cropped from their start)."""
    was = model.training
    model.eval()
    x = fixed_batch(clips, crop)
    if isinstance(model, ALMCodec):
        windows = [w] if w is not None else model.cfg.window_sizes
        vals = [L.recon_time(x, model(x, wi).x_hat).item() for wi in windows]
        out = float(np.mean(vals))
    else:
        out = L.recon_time(x, model(x)[0]).item()
    model.train(was)
    return out


# --------------------------------------------------------------------------- stage 1


def stage1_train(
    dataset,
    cfg: CodecConfig,
    *,
    steps: int | None = None,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    log: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Train Patchify/UnPatchify as an autoencoder with the MAE branch.

    The returned checkpoint keeps only ``patchify``/``unpatchify`` tensors once
    ``steps`` is reached; interrupted runs (``stop_at``) keep everything needed to resume.
    """
    cfg.validate()
    steps = cfg.steps if steps is None else steps
    clips = as_tensors(dataset, cfg.sample_rate)
    crop = int(round(cfg.crop_seconds * cfg.sample_rate))
    torch.manual_seed(cfg.seed)
    model = Stage1Autoencoder(cfg)
    opt = _adamw(model.parameters(), cfg, cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    start = 0
    if resume is not None:
        load_into(model, resume.group("model"), "model/")
        restore_optimizer(opt, resume, "optim_g")
        gen.set_state(resume.tensors["rng/torch"])
        start = resume.step
    history: list[dict] = []
    end = steps if stop_at is None else min(stop_at, steps)
    model.train()
    for step in range(start, end):
        x = sample_batch(clips, cfg.batch_size, crop, gen)
        rate = sample_rate_in(gen, cfg.mask_rate_range) if cfg.use_mae else 0.0
        n = x.shape[-1]
        frames = model.patchify(x)
        x_hat = model.unpatchify(frames)[..., :n]
        parts = {
            "l_rec_time": L.recon_time(x, x_hat),
            "l_rec_freq": L.recon_freq(x, x_hat, cfg.spectrogram, cfg.subbands, 3 if cfg.multiscale_recon else 1),
        }
        if cfg.use_mae and masked_count(rate, frames.shape[-2]) > 0:
            masked, mask = apply_mask_batch(frames, masked_count(rate, frames.shape[-2]), gen)
            pred = model.mae_out(model.mae_decoder(model.mae_encoder(masked)))
            parts["l_mae"] = L.mae_loss(pred, frames.detach(), mask, cfg.mae_l1_all_frames)
        total = L.weighted_total(parts, cfg.lambda_mae, cfg.lambda_ar)
        _check_finite(total, step)
        opt.zero_grad(set_to_none=True)
        total.backward()
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        report = L.total_generator_loss({k: v.item() for k, v in parts.items()}, cfg.lambda_mae, cfg.lambda_ar)
        rec = _record(step, report, stage=1, mask_rate=rate)
        history.append(rec)
        if log:
            log(rec)

    finished = end >= steps
    if finished:
        tensors = {k: v for k, v in _tensors("model", model).items() if k.startswith(("model/patchify.", "model/unpatchify."))}
        meta = {"seed": cfg.seed, "final": True}
    else:
        tensors = _tensors("model", model)
        opt_t, opt_meta = flatten_optimizer(opt, "optim_g")
        tensors.update(opt_t)
        tensors["rng/torch"] = _rng_tensor(gen)
        meta = {"seed": cfg.seed, "final": False, "optim_g": opt_meta}
    ckpt = Checkpoint("stage1", tensors, cfg.to_dict(), end, meta)
    ckpt.history = history
    return ckpt


# --------------------------------------------------------------------------- stage 2


def build_codec(cfg: CodecConfig, books: CodebookSet, stage1: Checkpoint | None = None) -> ALMCodec:
    torch.manual_seed(cfg.seed)
    model = ALMCodec(cfg, books)
    if stage1 is not None:
        front = stage1.group("model")
        for name in ("patchify", "unpatchify"):
            part = {k[len(name) + 1 :]: v for k, v in front.items() if k.startswith(name + ".")}
            if not part:
                raise CheckpointError(f"stage-1 checkpoint has no {name} tensors")
            load_into(getattr(model, name), part, f"model/{name}.")
    return model


def codebook_table(ckpt: Checkpoint) -> torch.Tensor:
    """(L, C, d) codebooks stored in a codec checkpoint."""
    group = ckpt.group("model")
    frozen = group.get("vq.frozen_books")
    if frozen is None:
        raise CheckpointError("checkpoint lacks tensor 'model/vq.frozen_books'")
    trainable = group.get("vq.trainable_books")
    return frozen if trainable is None else torch.cat([frozen, trainable])


def codec_from_checkpoint(ckpt: Checkpoint) -> ALMCodec:
    cfg = CodecConfig.from_dict(ckpt.config)
    group = ckpt.group("model")
    table = codebook_table(ckpt)
    try:
        books = CodebookSet(table.numpy())
        model = ALMCodec(cfg, books)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    load_into(model, group, "model/")
    model.eval()
    return model


def _generator_params(model: ALMCodec, freeze_patchify: bool) -> list[nn.Parameter]:
    if freeze_patchify:
        for p in model.patchify.parameters():
            p.requires_grad_(False)
    return [p for p in model.parameters() if p.requires_grad]


def stage2_train(
    dataset,
    cfg: CodecConfig,
    stage1: Checkpoint | None,
    books: CodebookSet,
    *,
    one_stage: bool = False,
    steps: int | None = None,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    log: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Full codec training with alternating 1:1 discriminator/generator updates.

    With ``one_stage`` the whole model (Patchify included) trains from scratch.
    """
    cfg.validate()
    if stage1 is None and not one_stage and resume is None:
        raise CheckpointError("stage 2 requires a stage-1 checkpoint")
    steps = cfg.steps if steps is None else steps
    clips = as_tensors(dataset, cfg.sample_rate)
    crop = int(round(cfg.crop_seconds * cfg.sample_rate))
    model = build_codec(cfg, books, None if one_stage else stage1)
    params = _generator_params(model, freeze_patchify=not one_stage)
    opt_g = _adamw(params, cfg, cfg.lr)
    torch.manual_seed(cfg.seed + 2)
    disc = L.DiscriminatorEnsemble(cfg)
    opt_d = _adamw(disc.parameters(), cfg, cfg.disc_lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    start = 0
    if resume is not None:
        load_into(model, resume.group("model"), "model/")
        load_into(disc, resume.group("disc"), "disc/")
        restore_optimizer(opt_g, resume, "optim_g")
        restore_optimizer(opt_d, resume, "optim_d")
        gen.set_state(resume.tensors["rng/torch"])
        start = resume.step

    history: list[dict] = []
    end = steps if stop_at is None else min(stop_at, steps)
    model.train()
    disc.train()
    for step in range(start, end):
        x = sample_batch(clips, cfg.batch_size, crop, gen)
        w = sample_window(gen, cfg.window_sizes)
        rate = sample_rate_in(gen, cfg.mask_rate_range) if cfg.use_mae else 0.0
        out = model(x, w, rate, gen)
        x_hat = out.x_hat
        adversarial = step >= cfg.disc_warmup_steps
        d_value = 0.0

        if adversarial:
            real_logits = [o[0] for o in disc(x)]
            fake_logits = [o[0] for o in disc(x_hat.detach())]
            ld = L.disc_loss(real_logits, fake_logits)
            _check_finite(ld, step)
            opt_d.zero_grad(set_to_none=True)
            ld.backward()
            nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
            opt_d.step()
            d_value = ld.item()

        parts = {
            "l_rec_time": L.recon_time(x, x_hat),
            "l_rec_freq": L.recon_freq(x, x_hat, cfg.spectrogram, cfg.subbands, 3 if cfg.multiscale_recon else 1),
            "l_commit": out.commit,
        }
        if adversarial:
            for p in disc.parameters():
                p.requires_grad_(False)
            fake = disc(x_hat)
            with torch.no_grad():
                real = disc(x)
            for p in disc.parameters():
                p.requires_grad_(True)
            parts["l_adv"] = L.gen_adv_loss([o[0] for o in fake])
            parts["l_feat"] = L.feature_match_loss([o[1] for o in real], [o[1] for o in fake])
        if out.mae_pred is not None:
            parts["l_mae"] = L.mae_loss(out.mae_pred, out.mae_target, out.mae_mask, cfg.mae_l1_all_frames)
        if out.ar_pred is not None:
            parts["l_ar"] = L.ar_loss(out.ar_pred, out.per_layer_quantized[..., 1:, :].detach())

        total = L.weighted_total(parts, cfg.lambda_mae, cfg.lambda_ar, cfg.commit_weight)
        _check_finite(total, step)
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt_g.step()

        report = L.total_generator_loss({k: v.item() for k, v in parts.items()}, cfg.lambda_mae, cfg.lambda_ar, cfg.commit_weight)
        rec = _record(step, report, stage="single" if one_stage else 2, window=w, mask_rate=rate, l_disc=d_value)
        history.append(rec)
        if log:
            log(rec)

    tensors = _tensors("model", model)
    tensors.update(_tensors("disc", disc))
    og, og_meta = flatten_optimizer(opt_g, "optim_g")
    od, od_meta = flatten_optimizer(opt_d, "optim_d")
    tensors.update(og)
    tensors.update(od)
    tensors["rng/torch"] = _rng_tensor(gen)
    meta = {"seed": cfg.seed, "final": end >= steps, "optim_g": og_meta, "optim_d": od_meta}
    ckpt = Checkpoint("single" if one_stage else "stage2", tensors, cfg.to_dict(), end, meta)
    ckpt.history = history
    return ckpt
