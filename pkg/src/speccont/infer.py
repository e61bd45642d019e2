"""Two-phase autoregressive continuation from a speech prompt.

Phase one decodes text token by token until the end marker; phase two
switches the same decoder to frame regression and rolls the spectrogram
forward until the output goes quiet or a cap is hit. Both phases share one
attention cache, so the whole procedure is a single left-to-right pass over
[prefix | text | frames], exactly the layout used in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .audio import FrontendConfig, griffin_lim_invert
from .autodiff import Tensor
from .model import (
    DecoderCache,
    DecoderConfig,
    EncoderConfig,
    apply_postnet,
    apply_prenet,
    decoder_append,
    decoder_forward,
    encode_speech,
    project_to_lm,
)
from .text import Vocabulary

__all__ = ["InferenceResult", "infer", "incremental_decode_equivalence"]


@dataclass(frozen=True)
class InferenceResult:
    """What one continuation run produced.

    token_ids includes the end marker when text stopped on it; frames holds
    every emitted frame, silent tail included. stop reasons record which
    limit ended each phase: 'eos' or 'max_text' for text, 'silence' or
    'max_frames' for frames.
    """

    token_ids: tuple[int, ...]
    transcript: str
    frames: np.ndarray
    wave: np.ndarray | None
    text_stop: str
    frame_stop: str


def _sample_token(logits: np.ndarray, temperature: float, rng) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    scaled = logits.astype(np.float64) / temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    return int(rng.choice(probs.shape[0], p=probs))


def _embed_token(tid: int, pos: int, params) -> Tensor:
    e = params["embed.tok"].data[tid] + params["embed.pos"].data[pos]
    return Tensor(e.reshape(1, 1, -1))


def infer(
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    vocab: Vocabulary,
    prompt_features: np.ndarray,
    *,
    max_text: int = 64,
    max_frames: int = 400,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
    silence_frames: int = 10,
    silence_margin: float = 2.0,
    frontend: FrontendConfig | None = None,
    synthesize: bool = False,
) -> InferenceResult:
    """Continue a (frames, mels) prompt: transcribe-and-extend the text, then
    regress continuation frames.

    temperature 0 decodes greedily and is fully deterministic; anything
    above 0 samples text tokens and needs an rng. Frame emission stops once
    ``silence_frames`` consecutive frames sit entirely below the log floor
    plus ``silence_margin``, mirroring how utterances in the corpus end.
    """
    if temperature < 0.0:
        raise ValueError("temperature must be >= 0")
    if temperature > 0.0 and rng is None:
        raise ValueError("sampled decoding needs an rng; pass temperature=0 for greedy")
    if max_text < 1 or max_frames < 0:
        raise ValueError("max_text must be >= 1 and max_frames >= 0")
    fe = frontend if frontend is not None else FrontendConfig()
    prompt = np.asarray(prompt_features, dtype=np.float32)
    if prompt.ndim != 2 or prompt.shape[1] != enc_cfg.input_mels:
        raise ValueError(
            f"prompt must be (frames, {enc_cfg.input_mels}), got {prompt.shape}"
        )

    with ad.no_grad():
        prefix = project_to_lm(encode_speech(Tensor(prompt), params, enc_cfg), params)
        cache = DecoderCache(dec_cfg.num_layers)
        decoder_append(cache, prefix.reshape((1,) + prefix.shape), params, dec_cfg)

        # phase one: text
        tokens: list[int] = []
        text_stop = "max_text"
        h = decoder_append(cache, _embed_token(vocab.sos_id, 0, params), params, dec_cfg)
        for i in range(max_text):
            logits = (h.data[0, -1] @ params["head.w"].data) + params["head.b"].data
            tid = _sample_token(logits, temperature, rng)
            tokens.append(tid)
            if tid == vocab.eos_id:
                text_stop = "eos"
                break
            if i + 1 >= max_text:
                break
            h = decoder_append(cache, _embed_token(tid, i + 1, params), params, dec_cfg)

        # the end marker is predicted, never fed; frame positions continue
        # right after the fed text inputs
        n_text = 1 + len(tokens) - (1 if text_stop == "eos" else 0)

        # phase two: frames
        frames: list[np.ndarray] = []
        frame_stop = "max_frames"
        quiet = 0
        if max_frames > 0:
            go = params["embed.go"].data + params["embed.pos"].data[n_text]
            h = decoder_append(cache, Tensor(go.reshape(1, 1, -1)), params, dec_cfg)
            for j in range(max_frames):
                frame = apply_postnet(h[:, -1:, :], params).data[0, 0]
                frames.append(frame.astype(np.float32))
                if np.all(frame < fe.log_floor + silence_margin):
                    quiet += 1
                    if quiet >= silence_frames:
                        frame_stop = "silence"
                        break
                else:
                    quiet = 0
                if j + 1 >= max_frames:
                    break
                nxt = apply_prenet(Tensor(frame.reshape(1, 1, -1)), params)
                nxt = nxt + params["embed.pos"][n_text + j + 1]
                h = decoder_append(cache, nxt, params, dec_cfg)

    out_frames = (
        np.stack(frames) if frames else np.zeros((0, dec_cfg.output_mels), np.float32)
    )
    shown = [t for t in tokens if t != vocab.eos_id]
    transcript = vocab.decode(shown)
    wave = griffin_lim_invert(out_frames, fe) if synthesize and frames else None
    return InferenceResult(
        token_ids=tuple(tokens),
        transcript=transcript,
        frames=out_frames,
        wave=wave,
        text_stop=text_stop,
        frame_stop=frame_stop,
    )


def incremental_decode_equivalence(
    params: dict[str, Tensor],
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    prompt_features: np.ndarray,
    token_ids,
    cont_frames: np.ndarray,
) -> float:
    """Max abs difference between the one-shot teacher-forced pass and the
    same sequence pushed through the attention cache position by position.

    This is the wiring check for cached decoding: any mask, position, or
    cache bug shows up as a large return value. Exact on the prefix, near
    machine precision elsewhere.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids[0] != 1:
        raise ValueError("token_ids must be 1-D and begin with the sos token")
    cont = np.asarray(cont_frames)
    if cont.dtype not in (np.float32, np.float64):
        cont = cont.astype(np.float32)

    with ad.no_grad():
        prefix = project_to_lm(
            encode_speech(Tensor(prompt_features), params, enc_cfg), params
        )
        full_logits, full_preds = decoder_forward(prefix, ids, cont, params, dec_cfg)

        cache = DecoderCache(dec_cfg.num_layers)
        decoder_append(cache, prefix.reshape((1,) + prefix.shape), params, dec_cfg)
        inc_logits = []
        for i, tid in enumerate(ids):
            h = decoder_append(cache, _embed_token(int(tid), i, params), params, dec_cfg)
            logits = (h.data[0, -1] @ params["head.w"].data) + params["head.b"].data
            inc_logits.append(logits)
        n = ids.shape[0]
        inc_preds = []
        m = cont.shape[0]
        for j in range(m):
            if j == 0:
                x = Tensor(
                    (params["embed.go"].data + params["embed.pos"].data[n]).reshape(1, 1, -1)
                )
            else:
                x = apply_prenet(Tensor(cont[j - 1].reshape(1, 1, -1)), params)
                x = x + params["embed.pos"][n + j]
            h = decoder_append(cache, x, params, dec_cfg)
            inc_preds.append(apply_postnet(h[:, -1:, :], params).data[0, 0])

    diff = float(np.max(np.abs(full_logits.data - np.stack(inc_logits))))
    if m > 0:
        diff = max(diff, float(np.max(np.abs(full_preds.data - np.stack(inc_preds)))))
    return diff
