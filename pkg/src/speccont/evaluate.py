"""Continuation quality metrics.

Everything here is a proxy: the corpus is synthetic, so there is no human
judgment to regress against. Token accuracy scores the decoded transcript
against the grammar's ground truth; the perplexity proxy is the mean
per-token cross entropy (in nats) of the true transcript under the model,
which sits near ln(vocab size) for an untrained model and falls toward zero
as the text side is learned; spectral similarity compares pooled mel
statistics of the generated continuation against the reference frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TrainingExample
from .infer import infer
from .losses import ce_loss
from .model import DecoderConfig, EncoderConfig, decoder_forward, encode_speech, project_to_lm
from .text import Vocabulary

__all__ = ["EvalReport", "token_accuracy", "transcript_ce", "spectral_similarity", "eval_continuations"]


@dataclass(frozen=True)
class EvalReport:
    token_accuracy: float
    proxy_perplexity: float
    spectral_similarity: float
    n_items: int

    def __post_init__(self):
        if self.n_items < 1:
            raise ValueError("report needs at least one item")


def token_accuracy(pred_ids, true_ids) -> float:
    """Position-wise match rate, counting length mismatch against the score:
    the denominator is the longer of the two sequences."""
    p = list(pred_ids)
    t = list(true_ids)
    if not p and not t:
        return 1.0
    n = max(len(p), len(t))
    hits = sum(1 for a, b in zip(p, t) if a == b)
    return hits / n


def transcript_ce(
    params, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, vocab: Vocabulary,
    example: TrainingExample,
) -> float:
    """Mean per-token CE (nats) of the true transcript, teacher-forced with
    the speech prefix attached. Near ln(vocab) under a random model."""
    ids = example.token_ids.tolist()
    text_in = np.asarray([vocab.sos_id] + ids, dtype=np.int64)
    text_tgt = np.asarray(ids + [vocab.eos_id], dtype=np.int64)
    with ad.no_grad():
        prefix = project_to_lm(
            encode_speech(Tensor(example.prompt), params, enc_cfg), params
        )
        logits, _ = decoder_forward(prefix, text_in, [], params, dec_cfg)
        ce = ce_loss(logits, text_tgt).item()
    return ce / text_tgt.shape[0]


def spectral_similarity(pred_frames: np.ndarray, true_frames: np.ndarray) -> float:
    """Cosine similarity of concatenated per-channel mean and variance,
    pooled over frames. 1.0 for identical inputs, 0.0 when either side is
    empty. Insensitive to length differences by construction."""
    p = np.asarray(pred_frames, dtype=np.float64)
    t = np.asarray(true_frames, dtype=np.float64)
    if p.ndim != 2 or t.ndim != 2 or p.shape[1] != t.shape[1]:
        raise ValueError(f"frame arrays must be (frames, mels): {p.shape} vs {t.shape}")
    if p.shape[0] == 0 or t.shape[0] == 0:
        return 0.0
    a = np.concatenate([p.mean(axis=0), p.var(axis=0)])
    b = np.concatenate([t.mean(axis=0), t.var(axis=0)])
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.dot(a, b) / (na * nb))


def eval_continuations(
    params,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    vocab: Vocabulary,
    examples: list[TrainingExample],
    *,
    max_text: int = 64,
    max_frames: int = 400,
) -> tuple[EvalReport, list[dict]]:
    """Greedy-decode every example and aggregate the three proxy metrics.

    Returns the report plus one row per item for drill-down.
    """
    if not examples:
        raise ValueError("no examples to evaluate")
    rows = []
    for ex in examples:
        res = infer(
            params, enc_cfg, dec_cfg, vocab, ex.prompt,
            max_text=max_text, max_frames=max_frames,
        )
        pred_ids = [t for t in res.token_ids if t != vocab.eos_id]
        rows.append(
            {
                "transcript": res.transcript,
                "reference": ex.transcript,
                "token_accuracy": token_accuracy(pred_ids, ex.token_ids.tolist()),
                "transcript_ce": transcript_ce(params, enc_cfg, dec_cfg, vocab, ex),
                "spectral_similarity": spectral_similarity(res.frames, ex.continuation),
                "text_stop": res.text_stop,
                "frame_stop": res.frame_stop,
                "n_frames": int(res.frames.shape[0]),
            }
        )
    report = EvalReport(
        token_accuracy=float(np.mean([r["token_accuracy"] for r in rows])),
        proxy_perplexity=float(np.mean([r["transcript_ce"] for r in rows])),
        spectral_similarity=float(np.mean([r["spectral_similarity"] for r in rows])),
        n_items=len(rows),
    )
    return report, rows
