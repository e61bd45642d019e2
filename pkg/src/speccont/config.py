"""Flat key=value run configuration.

One namespace, one line per setting, so a whole experiment fits in a short
text file that diffs cleanly. Keys map onto the frontend, encoder, decoder,
training, and masking dataclasses; command-line flags are merged on top of
the file, flags winning. Unknown keys are errors, not warnings: a typo that
silently falls back to a default is how experiments stop being comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

from .audio import FrontendConfig
from .augment import AugmentConfig
from .model import DecoderConfig, EncoderConfig

__all__ = ["RunSettings", "parse_kv_file", "parse_kv_pairs", "build_settings"]

# flat key -> (section, dataclass field, type)
_KEYS = {
    "sample_rate": ("frontend", "sample_rate", int),
    "frame_length_ms": ("frontend", "frame_length_ms", float),
    "frame_step_ms": ("frontend", "frame_step_ms", float),
    "mel_channels": ("frontend", "mel_channels", int),
    "fmin_hz": ("frontend", "fmin_hz", float),
    "fmax_hz": ("frontend", "fmax_hz", float),
    "fft_size": ("frontend", "fft_size", int),
    "energy_floor": ("frontend", "energy_floor", float),
    "conformer_dim": ("encoder", "conformer_dim", int),
    "encoder_blocks": ("encoder", "num_blocks", int),
    "encoder_heads": ("encoder", "attn_heads", int),
    "conv_channels": ("encoder", "conv_channels", int),
    "ff_multiplier": ("encoder", "ff_multiplier", int),
    "encoder_dropout": ("encoder", "dropout", float),
    "lm_dim": ("decoder", "lm_dim", int),
    "decoder_layers": ("decoder", "num_layers", int),
    "decoder_heads": ("decoder", "attn_heads", int),
    "hidden_dim": ("decoder", "hidden_dim", int),
    "prenet_bottleneck_dim": ("decoder", "prenet_bottleneck_dim", int),
    "max_positions": ("decoder", "max_positions", int),
    "decoder_dropout": ("decoder", "dropout", float),
    "objective_mode": ("train", "objective_mode", str),
    "batch_size": ("train", "batch_size", int),
    "peak_lr": ("train", "peak_lr", float),
    "warmup_steps": ("train", "warmup_steps", int),
    "continuation_loss_weight": ("train", "continuation_loss_weight", float),
    "derivative_loss_order": ("train", "derivative_loss_order", int),
    "augment": ("train", "augment", bool),
    "checkpoint_every": ("train", "checkpoint_every", int),
    "deterministic": ("train", "deterministic", bool),
    "seed": ("train", "seed", int),
    "max_steps": ("train", "max_steps", int),
    "freq_mask_count": ("masking", "freq_mask_count", int),
    "freq_mask_max": ("masking", "freq_mask_max", int),
    "time_mask_count": ("masking", "time_mask_count", int),
    "time_mask_max": ("masking", "time_mask_max", int),
    "time_mask_max_ratio": ("masking", "time_mask_max_ratio", float),
}


@dataclass(frozen=True)
class RunSettings:
    """Typed view of one merged configuration.

    decoder_kwargs and train_kwargs stay as dicts because their dataclasses
    need values known only at run time (the corpus vocabulary size; the
    mandatory seed and step budget).
    """

    frontend: FrontendConfig
    encoder: EncoderConfig
    decoder_kwargs: dict
    train_kwargs: dict
    masking: AugmentConfig


def parse_kv_file(path: str) -> dict[str, str]:
    """Read `key=value` lines; '#' starts a comment, blanks are skipped."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            if not key or not value:
                raise ValueError(f"{path}:{lineno}: empty key or value")
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def parse_kv_pairs(pairs) -> dict[str, str]:
    """Parse repeated `key=value` command-line tokens."""
    out: dict[str, str] = {}
    for item in pairs:
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, value, target):
    if isinstance(value, target):
        return value
    text = str(value)
    if target is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"key {key!r}: cannot read {text!r} as a boolean")
    try:
        return target(text)
    except ValueError as e:
        raise ValueError(f"key {key!r}: cannot read {text!r} as {target.__name__}") from e


def build_settings(flat: dict) -> RunSettings:
    """Assemble typed settings from a merged flat dict.

    Rejects unknown keys by name. Sections not mentioned keep their
    defaults.
    """
    sections: dict[str, dict] = {
        "frontend": {}, "encoder": {}, "decoder": {}, "train": {}, "masking": {}
    }
    for key, value in flat.items():
        if key not in _KEYS:
            raise ValueError(f"unknown configuration key {key!r}")
        section, field_name, target = _KEYS[key]
        sections[section][field_name] = _coerce(key, value, target)

    frontend = FrontendConfig(**sections["frontend"])
    enc_kwargs = sections["encoder"]
    enc_kwargs.setdefault("input_mels", frontend.mel_channels)
    dec_kwargs = sections["decoder"]
    dec_kwargs.setdefault("output_mels", frontend.mel_channels)
    return RunSettings(
        frontend=frontend,
        encoder=EncoderConfig(**enc_kwargs),
        decoder_kwargs=dec_kwargs,
        train_kwargs=sections["train"],
        masking=AugmentConfig(**sections["masking"]),
    )
