"""Training loop: joint transcription + continuation objective over a corpus.

One step is one batch through the full mixed sequence (speech prefix, text
region, frame region), a backward pass, and an Adam update under the warmup
inverse-sqrt schedule. Objective ablations reuse the same loop with regions
or loss terms removed, so mode comparisons differ only in the objective.

A metrics row is appended per step; in deterministic mode the wall-clock
column is zeroed so two runs from the same seed produce byte-identical logs.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import FrontendConfig
from .augment import AugmentConfig, apply_spec_augment
from .autodiff import NonFiniteError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import TrainingExample, Utterance, corpus_vocab, make_training_example
from .losses import LossBreakdown, ce_loss, recon_loss, total_loss
from .model import (
    DecoderConfig,
    EncoderConfig,
    decoder_forward,
    encode_speech,
    init_model,
    param_group,
    project_to_lm,
)
from .optim import AdamState, adam_step, lr_schedule
from .text import Vocabulary

__all__ = [
    "OBJECTIVE_MODES",
    "TrainConfig",
    "TrainResult",
    "train",
    "pack_configs",
    "unpack_configs",
]

OBJECTIVE_MODES = ("full", "lm_only", "asr_only", "no_ce", "no_delta")

METRICS_COLUMNS = ("step", "ce", "recon_s", "recon_f", "recon_t", "total", "lr", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    max_steps: int
    objective_mode: str = "full"
    batch_size: int = 8
    peak_lr: float = 3.5e-4
    warmup_steps: int = 100
    continuation_loss_weight: float = 0.1
    derivative_loss_order: int = 3
    augment: bool = False
    checkpoint_every: int = 500
    deterministic: bool = True
    init_encoder_from: str | None = None
    init_decoder_from: str | None = None

    def __post_init__(self):
        if self.objective_mode not in OBJECTIVE_MODES:
            raise ValueError(
                f"objective_mode {self.objective_mode!r} not one of {OBJECTIVE_MODES}"
            )
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if self.continuation_loss_weight < 0:
            raise ValueError("continuation_loss_weight must be >= 0")
        if self.derivative_loss_order < 1:
            raise ValueError("derivative_loss_order must be at least 1")


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    opt_state: AdamState
    vocab: Vocabulary
    enc_cfg: EncoderConfig
    dec_cfg: DecoderConfig
    metrics_path: str
    final_checkpoint: str
    best_checkpoint: str
    best_step: int
    history: list[dict] = field(default_factory=list)


def pack_configs(
    enc: EncoderConfig,
    dec: DecoderConfig,
    train_cfg: TrainConfig,
    vocab: Vocabulary,
    frontend: FrontendConfig,
) -> dict:
    """Flatten everything a consumer needs into one JSON-safe dict."""
    return {
        "frontend": asdict(frontend),
        "encoder": asdict(enc),
        "decoder": asdict(dec),
        "train": asdict(train_cfg),
        "vocab": list(vocab.symbols),
    }


def unpack_configs(
    blob: dict,
) -> tuple[FrontendConfig, EncoderConfig, DecoderConfig, Vocabulary]:
    """Inverse of pack_configs; JSON decodes tuples as lists, so re-tuple."""
    e = dict(blob["encoder"])
    e["conv_kernel"] = tuple(e["conv_kernel"])
    e["conv_stride"] = tuple(e["conv_stride"])
    return (
        FrontendConfig(**blob["frontend"]),
        EncoderConfig(**e),
        DecoderConfig(**blob["decoder"]),
        Vocabulary(tuple(blob["vocab"])),
    )


def _copy_groups(dst: dict[str, Tensor], src_path: str, groups: set[str]) -> None:
    src, _, _, _ = load_checkpoint(src_path)
    for name, p in dst.items():
        if param_group(name) not in groups:
            continue
        if name not in src:
            raise ValueError(f"{src_path}: missing parameter '{name}' for warm start")
        if src[name].shape != p.shape:
            raise ValueError(
                f"{src_path}: parameter '{name}' has shape {src[name].shape}, "
                f"expected {p.shape}"
            )
        p.data = src[name].data.astype(p.data.dtype).copy()


def _stack_batch(
    examples: list[TrainingExample],
    idxs,
    vocab: Vocabulary,
    cfg: TrainConfig,
    step: int,
    frontend: FrontendConfig,
    augment: AugmentConfig | None,
):
    prompts, conts, text_in, text_tgt = [], [], [], []
    for i in idxs:
        ex = examples[i]
        prompt = ex.prompt
        if augment is not None:
            rng = np.random.default_rng([cfg.seed, step, int(i)])
            prompt = apply_spec_augment(prompt, augment, rng, fill=frontend.log_floor)
        prompts.append(prompt)
        conts.append(ex.continuation)
        ids = ex.token_ids.tolist()
        text_in.append([vocab.sos_id] + ids)
        text_tgt.append(ids + [vocab.eos_id])
    return (
        np.stack(prompts).astype(np.float32),
        np.stack(conts).astype(np.float32),
        np.asarray(text_in, dtype=np.int64),
        np.asarray(text_tgt, dtype=np.int64),
    )


def _forward_losses(
    prompts: np.ndarray,
    conts: np.ndarray,
    text_in: np.ndarray,
    text_tgt: np.ndarray,
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    cfg: TrainConfig,
):
    """Returns (loss_tensor, breakdown floats (ce, s, f, t, recon, total))."""
    mode = cfg.objective_mode
    lam = cfg.continuation_loss_weight
    b = prompts.shape[0]

    if mode == "lm_only":
        prefix = Tensor(np.zeros((b, 0, dec_cfg.lm_dim), dtype=np.float32))
    else:
        prefix = project_to_lm(encode_speech(Tensor(prompts), params, enc_cfg), params)

    frames = [] if mode in ("lm_only", "asr_only") else conts
    logits, preds = decoder_forward(prefix, text_in, frames, params, dec_cfg)
    ce = ce_loss(logits, text_tgt)

    if mode in ("lm_only", "asr_only"):
        zero = 0.0
        return ce, (ce.item(), zero, zero, zero, zero, ce.item())

    s, f, t, recon = recon_loss(
        Tensor(conts), preds, order=cfg.derivative_loss_order,
        include_deltas=(mode != "no_delta"),
    )
    if mode == "no_ce":
        loss = lam * recon
        tot = loss.item()
    else:
        loss = total_loss(ce, recon, lam)
        tot = loss.item()
    return loss, (ce.item(), s.item(), f.item(), t.item(), recon.item(), tot)


def train(
    corpus: list[Utterance],
    cfg: TrainConfig,
    out_dir: str,
    enc_cfg: EncoderConfig | None = None,
    dec_cfg: DecoderConfig | None = None,
    frontend: FrontendConfig | None = None,
) -> TrainResult:
    """Run cfg.max_steps updates over the corpus and leave checkpoints plus a
    metrics log in out_dir.

    Checkpoints land every cfg.checkpoint_every steps and at the end;
    'best.ckpt' is a symlink to the saved checkpoint with the lowest total
    loss. Any non-finite loss or gradient aborts with the offending step in
    the message rather than training through the damage.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    frontend = frontend if frontend is not None else FrontendConfig()
    vocab = corpus_vocab(corpus)
    enc_cfg = enc_cfg if enc_cfg is not None else EncoderConfig(input_mels=frontend.mel_channels)
    if dec_cfg is None:
        dec_cfg = DecoderConfig(
            vocab_size=len(vocab.symbols), output_mels=frontend.mel_channels
        )
    elif dec_cfg.vocab_size != len(vocab.symbols):
        raise ValueError(
            f"decoder vocab_size {dec_cfg.vocab_size} != corpus vocabulary "
            f"{len(vocab.symbols)}"
        )

    examples = [make_training_example(u, vocab, frontend) for u in corpus]
    shapes = {ex.prompt.shape for ex in examples} | {ex.continuation.shape for ex in examples}
    lengths = {ex.token_ids.shape[0] for ex in examples}
    if len({ex.prompt.shape for ex in examples}) > 1 or len(
        {ex.continuation.shape for ex in examples}
    ) > 1 or len(lengths) > 1:
        raise ValueError(f"ragged corpus unsupported: shapes {shapes}, lengths {lengths}")

    os.makedirs(out_dir, exist_ok=True)
    params = init_model(enc_cfg, dec_cfg, np.random.default_rng(cfg.seed))
    if cfg.init_encoder_from:
        _copy_groups(params, cfg.init_encoder_from, {"enc"})
    if cfg.init_decoder_from:
        _copy_groups(params, cfg.init_decoder_from, {"embed", "dec", "head"})
    state = AdamState()
    augment = AugmentConfig() if cfg.augment else None
    config_blob = pack_configs(enc_cfg, dec_cfg, cfg, vocab, frontend)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    history: list[dict] = []
    best_total, best_step, best_path = float("inf"), 0, ""
    order_rng = np.random.default_rng([cfg.seed, 1])
    order: list[int] = []

    def save_at(step: int, name: str) -> str:
        path = os.path.join(out_dir, name)
        save_checkpoint(path, params, config_blob, step, state)
        return path

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for step in range(1, cfg.max_steps + 1):
            t0 = time.perf_counter()
            if len(order) < cfg.batch_size:
                order.extend(order_rng.permutation(len(examples)).tolist())
            take = min(cfg.batch_size, len(examples))
            idxs, order = order[:take], order[take:]

            prompts, conts, text_in, text_tgt = _stack_batch(
                examples, idxs, vocab, cfg, step, frontend, augment
            )
            try:
                loss, (ce_v, s_v, f_v, t_v, r_v, tot_v) = _forward_losses(
                    prompts, conts, text_in, text_tgt, params, enc_cfg, dec_cfg, cfg
                )
                LossBreakdown(
                    ce=ce_v, recon_s=s_v, recon_f=f_v, recon_t=t_v, recon=r_v,
                    total=tot_v, lambda_r=cfg.continuation_loss_weight,
                    order=cfg.derivative_loss_order,
                )
                loss.backward()
                trainable = {k: p for k, p in params.items() if p.grad is not None}
                if cfg.objective_mode == "full" and step == 1:
                    missing = [k for k in params if k not in trainable]
                    if missing:
                        raise ValueError(
                            f"parameters received no gradient under the full "
                            f"objective: {sorted(missing)[:5]}"
                        )
                if not trainable:
                    raise ValueError("no parameter received a gradient")
                lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps)
                adam_step(trainable, state, lr)
            except NonFiniteError as e:
                raise NonFiniteError(f"aborting at step {step}: {e}") from e

            wall_ms = 0.0 if cfg.deterministic else (time.perf_counter() - t0) * 1e3
            row = {
                "step": step, "ce": ce_v, "recon_s": s_v, "recon_f": f_v,
                "recon_t": t_v, "total": tot_v, "lr": lr, "wall_ms": wall_ms,
            }
            history.append(row)
            writer.writerow(
                [step] + [f"{row[c]:.10g}" for c in METRICS_COLUMNS[1:]]
            )
            fh.flush()

            if step % cfg.checkpoint_every == 0 or step == cfg.max_steps:
                name = "final.ckpt" if step == cfg.max_steps else f"step_{step:06d}.ckpt"
                path = save_at(step, name)
                if tot_v < best_total:
                    best_total, best_step, best_path = tot_v, step, path

    best_link = os.path.join(out_dir, "best.ckpt")
    if os.path.islink(best_link) or os.path.exists(best_link):
        os.remove(best_link)
    os.symlink(os.path.basename(best_path), best_link)

    return TrainResult(
        params=params,
        opt_state=state,
        vocab=vocab,
        enc_cfg=enc_cfg,
        dec_cfg=dec_cfg,
        metrics_path=metrics_path,
        final_checkpoint=os.path.join(out_dir, "final.ckpt"),
        best_checkpoint=best_link,
        best_step=best_step,
        history=history,
    )
