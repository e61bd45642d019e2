"""Speech encoder, projection, and prefix-conditioned causal decoder.

The encoder subsamples a log-mel spectrogram with a strided 2-D convolution
and refines it with Conformer-style blocks.  A single affine projection maps
encoder states into the decoder width, and those projected states are simply
the first positions of the decoder's input sequence: prefix conditioning is
the only coupling between the two halves, there is no cross-attention.

Decoder input layout, one causal stream in three contiguous regions:

    [ speech prefix | sos, tokens | go, prenet(frames[:-1]) ]

Teacher forcing: text position i predicts token i+1 of (tokens + eos), frame
position j predicts continuation frame j.  Learned absolute position
embeddings start at zero on the sos token and run consecutively through the
frame region; the prefix carries no added positions (the encoder's strided
conv already makes it order-aware).

Forward passes accept a single example or a batch; batching requires equal
lengths, which the synthetic corpus guarantees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "EncoderConfig",
    "DecoderConfig",
    "init_model",
    "param_count",
    "param_group",
    "encode_speech",
    "project_to_lm",
    "apply_prenet",
    "apply_postnet",
    "decoder_forward",
    "DecoderCache",
    "decoder_append",
]

_NEG = -1e9  # additive mask value; exp underflows to exactly 0, so masked
# positions contribute nothing and causality holds bitwise


@dataclass(frozen=True)
class EncoderConfig:
    conformer_dim: int = 64
    num_blocks: int = 2
    attn_heads: int = 4
    conv_kernel: tuple[int, int] = (3, 3)
    conv_stride: tuple[int, int] = (2, 2)
    input_mels: int = 128
    conv_channels: int = 8
    ff_multiplier: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.conformer_dim % self.attn_heads:
            raise ValueError(
                f"conformer_dim {self.conformer_dim} not divisible by {self.attn_heads} heads"
            )


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    lm_dim: int = 64
    num_layers: int = 2
    attn_heads: int = 4
    hidden_dim: int = 256
    prenet_bottleneck_dim: int = 16
    max_positions: int = 512
    output_mels: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.lm_dim % self.attn_heads:
            raise ValueError(f"lm_dim {self.lm_dim} not divisible by {self.attn_heads} heads")
        if self.prenet_bottleneck_dim >= self.lm_dim:
            raise ValueError(
                f"prenet bottleneck {self.prenet_bottleneck_dim} must be narrower than "
                f"lm_dim {self.lm_dim}"
            )


# -- construction -------------------------------------------------------------


def _normal(rng: np.random.Generator, shape, scale: float = 0.02) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(np.float32), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def _add_attn(params, prefix: str, dim: int, rng) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = _normal(rng, (dim, dim))
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{name}"] = _normal(rng, (dim,))
    params[f"{prefix}.ln_g"] = _ones((dim,))
    params[f"{prefix}.ln_b"] = _zeros((dim,))


def _add_ff(params, prefix: str, dim: int, hidden: int, rng) -> None:
    params[f"{prefix}.w1"] = _normal(rng, (dim, hidden))
    params[f"{prefix}.b1"] = _normal(rng, (hidden,))
    params[f"{prefix}.w2"] = _normal(rng, (hidden, dim))
    params[f"{prefix}.b2"] = _normal(rng, (dim,))
    params[f"{prefix}.ln_g"] = _ones((dim,))
    params[f"{prefix}.ln_b"] = _zeros((dim,))


def init_model(enc: EncoderConfig, dec: DecoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameter set; names are stable and prefix-grouped for warm starts."""
    p: dict[str, Tensor] = {}
    kh, kw = enc.conv_kernel
    d = enc.conformer_dim
    p["enc.conv.w"] = _normal(rng, (kh, kw, 1, enc.conv_channels))
    p["enc.conv.b"] = _normal(rng, (enc.conv_channels,))
    mel_sub = -(-enc.input_mels // enc.conv_stride[1])
    p["enc.in.w"] = _normal(rng, (mel_sub * enc.conv_channels, d))
    p["enc.in.b"] = _normal(rng, (d,))
    for i in range(enc.num_blocks):
        _add_ff(p, f"enc.block{i}.ff1", d, enc.ff_multiplier * d, rng)
        _add_attn(p, f"enc.block{i}.attn", d, rng)
        p[f"enc.block{i}.conv.ln_g"] = _ones((d,))
        p[f"enc.block{i}.conv.ln_b"] = _zeros((d,))
        p[f"enc.block{i}.conv.dw"] = _normal(rng, (3, d))
        p[f"enc.block{i}.conv.pw"] = _normal(rng, (d, d))
        p[f"enc.block{i}.conv.pb"] = _normal(rng, (d,))
        _add_ff(p, f"enc.block{i}.ff2", d, enc.ff_multiplier * d, rng)
    p["enc.out.ln_g"] = _ones((d,))
    p["enc.out.ln_b"] = _zeros((d,))

    p["proj.w"] = _normal(rng, (d, dec.lm_dim))
    p["proj.b"] = _normal(rng, (dec.lm_dim,))

    p["embed.tok"] = _normal(rng, (dec.vocab_size, dec.lm_dim))
    p["embed.pos"] = _normal(rng, (dec.max_positions, dec.lm_dim))
    p["embed.go"] = _normal(rng, (dec.lm_dim,))

    p["prenet.w1"] = _normal(rng, (dec.output_mels, dec.prenet_bottleneck_dim))
    p["prenet.b1"] = _normal(rng, (dec.prenet_bottleneck_dim,))
    p["prenet.w2"] = _normal(rng, (dec.prenet_bottleneck_dim, dec.lm_dim))
    p["prenet.b2"] = _normal(rng, (dec.lm_dim,))

    for i in range(dec.num_layers):
        _add_attn(p, f"dec.layer{i}.attn", dec.lm_dim, rng)
        _add_ff(p, f"dec.layer{i}.ff", dec.lm_dim, dec.hidden_dim, rng)
    p["dec.out.ln_g"] = _ones((dec.lm_dim,))
    p["dec.out.ln_b"] = _zeros((dec.lm_dim,))

    p["postnet.w1"] = _normal(rng, (dec.lm_dim, dec.hidden_dim))
    p["postnet.b1"] = _normal(rng, (dec.hidden_dim,))
    p["postnet.w2"] = _normal(rng, (dec.hidden_dim, dec.output_mels))
    p["postnet.b2"] = _normal(rng, (dec.output_mels,))

    p["head.w"] = _normal(rng, (dec.lm_dim, dec.vocab_size))
    p["head.b"] = _normal(rng, (dec.vocab_size,))
    return p


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def param_group(name: str) -> str:
    """Top-level group of a parameter name (enc, proj, embed, prenet, dec,
    postnet, head); init_from warm starts copy whole groups."""
    return name.split(".", 1)[0]


# -- shared sub-layers --------------------------------------------------------


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, w) + b


def _ln(x: Tensor, params, prefix: str) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    return x.reshape((b, l, heads, d // heads)).transpose((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape((b, l, h * dh))


def _attention(
    x: Tensor,
    params,
    prefix: str,
    heads: int,
    mask: np.ndarray | None,
    rng: np.random.Generator | None,
    drop: float,
) -> Tensor:
    h = _ln(x, params, prefix)
    q = _split_heads(_affine(h, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), heads)
    k = _split_heads(_affine(h, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), heads)
    v = _split_heads(_affine(h, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), heads)
    dh = q.shape[-1]
    scores = ad.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(mask[None, None, :, :])
    att = ad.softmax(scores, axis=-1)
    att = ad.dropout(att, drop, rng)
    out = _merge_heads(ad.matmul(att, v))
    return _affine(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _feed_forward(x: Tensor, params, prefix: str, rng, drop: float) -> Tensor:
    h = ad.gelu(_affine(_ln(x, params, prefix), params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    h = ad.dropout(h, drop, rng)
    return _affine(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _causal_mask(total: int, new: int | None = None) -> np.ndarray:
    """Additive mask; rows are the last `new` positions of a `total`-long
    causal sequence (all rows when new is None)."""
    m = np.triu(np.full((total, total), _NEG, dtype=np.float32), k=1)
    return m if new is None else m[total - new :]


# -- encoder ------------------------------------------------------------------


def encode_speech(
    x_p, params: dict[str, Tensor], cfg: EncoderConfig, rng: np.random.Generator | None = None
) -> Tensor:
    """Log-mel prompt (T, F) or (B, T, F) -> hidden states (…, ceil(T/2), dim)."""
    x = x_p if isinstance(x_p, Tensor) else Tensor(np.asarray(x_p, dtype=np.float32))
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[2] != cfg.input_mels:
        raise ad.ShapeMismatchError(
            f"encoder expects (…, T, {cfg.input_mels}) spectrograms, got {x.shape}"
        )
    if x.shape[1] == 0:
        raise ValueError("cannot encode an empty spectrogram")

    b, t, f = x.shape
    h = ad.conv2d(x.reshape((b, t, f, 1)), params["enc.conv.w"], stride=cfg.conv_stride)
    h = ad.relu(h + params["enc.conv.b"])
    bt = h.shape[1]
    h = _affine(h.reshape((b, bt, h.shape[2] * h.shape[3])), params["enc.in.w"], params["enc.in.b"])

    drop = cfg.dropout if rng is not None else 0.0
    for i in range(cfg.num_blocks):
        blk = f"enc.block{i}"
        h = h + 0.5 * _feed_forward(h, params, f"{blk}.ff1", rng, drop)
        h = h + _attention(h, params, f"{blk}.attn", cfg.attn_heads, None, rng, drop)
        c = _ln(h, params, f"{blk}.conv")
        c = ad.gelu(ad.conv1d_depthwise(c, params[f"{blk}.conv.dw"]))
        c = _affine(c, params[f"{blk}.conv.pw"], params[f"{blk}.conv.pb"])
        h = h + c
        h = h + 0.5 * _feed_forward(h, params, f"{blk}.ff2", rng, drop)
    h = _ln(h, params, "enc.out")
    return h[0] if single else h


def project_to_lm(x_pe: Tensor, params: dict[str, Tensor]) -> Tensor:
    if x_pe.shape[-1] != params["proj.w"].shape[0]:
        raise ad.ShapeMismatchError(
            f"projection expects dim {params['proj.w'].shape[0]}, got {x_pe.shape}"
        )
    return _affine(x_pe, params["proj.w"], params["proj.b"])


# -- acoustic bottleneck nets -------------------------------------------------


def apply_prenet(frames, params: dict[str, Tensor]) -> Tensor:
    """(…, F) log-mel frames -> (…, lm_dim) through the bottleneck."""
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float32))
    if x.shape[-1] != params["prenet.w1"].shape[0]:
        raise ad.ShapeMismatchError(
            f"prenet expects {params['prenet.w1'].shape[0]}-dim frames, got {x.shape}"
        )
    h = ad.relu(_affine(x, params["prenet.w1"], params["prenet.b1"]))
    return _affine(h, params["prenet.w2"], params["prenet.b2"])


def apply_postnet(hidden: Tensor, params: dict[str, Tensor]) -> Tensor:
    """(…, lm_dim) decoder states -> (…, F) log-mel predictions, unbounded."""
    if hidden.shape[-1] != params["postnet.w1"].shape[0]:
        raise ad.ShapeMismatchError(
            f"postnet expects {params['postnet.w1'].shape[0]}-dim states, got {hidden.shape}"
        )
    h = ad.relu(_affine(hidden, params["postnet.w1"], params["postnet.b1"]))
    return _affine(h, params["postnet.w2"], params["postnet.b2"])


# -- decoder ------------------------------------------------------------------


def _decoder_stack(
    x: Tensor,
    params,
    cfg: DecoderConfig,
    mask: np.ndarray | None,
    rng,
    drop: float,
    cache: "DecoderCache | None" = None,
) -> Tensor:
    h = x
    for i in range(cfg.num_layers):
        layer = f"dec.layer{i}"
        h = h + _cached_attention(h, params, f"{layer}.attn", cfg.attn_heads, mask, rng, drop, cache, i)
        h = h + _feed_forward(h, params, f"{layer}.ff", rng, drop)
    return _ln(h, params, "dec.out")


def _cached_attention(x, params, prefix, heads, mask, rng, drop, cache, layer_idx) -> Tensor:
    if cache is None:
        return _attention(x, params, prefix, heads, mask, rng, drop)
    h = _ln(x, params, prefix)
    q = _split_heads(_affine(h, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), heads)
    k_new = _split_heads(_affine(h, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), heads)
    v_new = _split_heads(_affine(h, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), heads)
    k, v = cache.extend(layer_idx, k_new, v_new)
    dh = q.shape[-1]
    scores = ad.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(mask[None, None, :, :])
    out = _merge_heads(ad.matmul(ad.softmax(scores, axis=-1), v))
    return _affine(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _text_region_embeddings(text_ids: np.ndarray, params, cfg: DecoderConfig) -> Tensor:
    n = text_ids.shape[-1]
    tok = ad.embedding(params["embed.tok"], text_ids)
    pos = params["embed.pos"][:n]
    return tok + pos


def decoder_forward(
    x_plm: Tensor,
    text_ids,
    cont_frames,
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Teacher-forced pass over [prefix | text | frames].

    text_ids is [sos, tokens…] (the eos appears only in targets); cont_frames
    are the ground-truth continuation frames, of which the last is never fed
    (it is only predicted).  Returns text logits for every text position and
    frame predictions for every continuation frame; an empty cont_frames
    yields an empty frame region (text-only mode).
    """
    prefix = x_plm if isinstance(x_plm, Tensor) else Tensor(np.asarray(x_plm, dtype=np.float32))
    single = prefix.ndim == 2
    ids = np.asarray(text_ids)
    if isinstance(cont_frames, Tensor):
        frames = cont_frames
    else:
        arr = np.asarray(cont_frames)
        if arr.dtype not in (np.float32, np.float64):  # keep f64 for grad checks
            arr = arr.astype(np.float32)
        if arr.size == 0:  # allow [] for text-only mode
            arr = arr.reshape((0, cfg.output_mels) if single else (prefix.shape[0], 0, cfg.output_mels))
        frames = Tensor(arr)
    if single:
        prefix = prefix.reshape((1,) + prefix.shape)
        ids = ids.reshape((1, -1))
        frames = frames.reshape((1,) + frames.shape)
    if ids.ndim != 2 or frames.ndim != 3 or prefix.ndim != 3:
        raise ad.ShapeMismatchError(
            f"inconsistent batching: prefix {prefix.shape}, text {ids.shape}, frames {frames.shape}"
        )
    if not np.all(ids[:, 0] == 1):
        raise ValueError("text_ids must begin with the sos token")

    b, p, _ = prefix.shape
    n = ids.shape[1]
    m = frames.shape[1]
    total = p + n + m
    if n + m > cfg.max_positions:
        raise ValueError(
            f"text+frame length {n + m} exceeds max_positions {cfg.max_positions}"
        )

    parts = [prefix, _text_region_embeddings(ids, params, cfg)]
    if m > 0:
        go = ad.broadcast_to(params["embed.go"].reshape((1, 1, cfg.lm_dim)), (b, 1, cfg.lm_dim))
        if m > 1:
            fed = apply_prenet(frames[:, : m - 1, :], params)
            frame_in = ad.concat([go, fed], axis=1)
        else:
            frame_in = go
        parts.append(frame_in + params["embed.pos"][n : n + m])
    seq = ad.concat(parts, axis=1)

    drop = cfg.dropout if rng is not None else 0.0
    h = _decoder_stack(seq, params, cfg, _causal_mask(total), rng, drop)

    text_h = h[:, p : p + n, :]
    text_logits = _affine(text_h, params["head.w"], params["head.b"])
    if m > 0:
        frame_preds = apply_postnet(h[:, p + n :, :], params)
    else:
        frame_preds = Tensor(np.zeros((b, 0, cfg.output_mels), dtype=np.float32))
    if single:
        return text_logits[0], frame_preds[0]
    return text_logits, frame_preds


# -- incremental decoding -----------------------------------------------------


class DecoderCache:
    """Per-layer attention key/value history for autoregressive decoding.

    Grows with each decoder_append call; equivalent to rerunning the full
    forward over the concatenated inputs (same weights, same mask pattern).
    """

    def __init__(self, num_layers: int):
        self.keys: list[Tensor | None] = [None] * num_layers
        self.values: list[Tensor | None] = [None] * num_layers

    @property
    def length(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[2]

    def extend(self, layer: int, k_new: Tensor, v_new: Tensor) -> tuple[Tensor, Tensor]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k_new, v_new
        else:
            self.keys[layer] = ad.concat([self.keys[layer], k_new], axis=2)
            self.values[layer] = ad.concat([self.values[layer], v_new], axis=2)
        return self.keys[layer], self.values[layer]


def decoder_append(
    cache: DecoderCache, new_inputs: Tensor, params: dict[str, Tensor], cfg: DecoderConfig
) -> Tensor:
    """Run the decoder stack over new positions only, attending to the cache.

    new_inputs is (1, n, lm_dim), already embedded and position-tagged.
    Returns the final hidden states (1, n, lm_dim) for the new positions.
    """
    past = cache.length
    total = past + new_inputs.shape[1]
    mask = _causal_mask(total, new=new_inputs.shape[1])
    return _decoder_stack(new_inputs, params, cfg, mask, rng=None, drop=0.0, cache=cache)
