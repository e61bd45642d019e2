"""Synthetic tone-sequence corpus and training-example assembly.

The corpus is a deterministic grammar over pure tones: each symbol maps to a
fixed sine frequency, and each utterance walks the alphabet by a fixed cyclic
stride from its start symbol. Continuations are therefore exactly predictable
from the prompt, which is what makes small-scale overfit and ablation
experiments meaningful: a model that has learned the grammar can be checked
against ground truth symbol by symbol, directly in the mel domain.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import FrontendConfig, load_wav, split_prompt, stft_logmel
from .augment import AugmentConfig, apply_spec_augment
from .text import Vocabulary, build_vocab

__all__ = [
    "ToneGrammar",
    "Utterance",
    "TrainingExample",
    "synth_dataset",
    "make_training_example",
    "corpus_vocab",
    "classify_segments",
    "write_manifest",
    "read_manifest",
    "load_corpus",
]


@dataclass(frozen=True)
class ToneGrammar:
    """Cyclic successor grammar over a fixed alphabet of pure tones.

    Symbol i sounds at a frequency on a geometric ladder between
    ``base_freq_hz`` and ``top_freq_hz``; the successor of a symbol is the
    one ``successor_stride`` steps ahead (mod alphabet size), so a full
    utterance is determined by its first symbol. The stride must be coprime
    with the alphabet size so every symbol is reachable from every start.
    """

    alphabet: str = "abcdefgh"
    base_freq_hz: float = 300.0
    top_freq_hz: float = 3000.0
    segment_seconds: float = 0.5
    tail_silence_seconds: float = 0.3
    symbols_per_utterance: int = 10
    amplitude: float = 0.4
    ramp_seconds: float = 0.005
    successor_stride: int = 3
    speaker_offset_hz: float = 15.0

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet) or len(self.alphabet) < 2:
            raise ValueError("alphabet must hold at least two distinct symbols")
        if math.gcd(self.successor_stride, len(self.alphabet)) != 1:
            raise ValueError(
                f"stride {self.successor_stride} shares a factor with "
                f"alphabet size {len(self.alphabet)}; cycle would not cover it"
            )
        if not 0.0 < self.base_freq_hz < self.top_freq_hz:
            raise ValueError("need 0 < base_freq_hz < top_freq_hz")
        if self.symbols_per_utterance < 1:
            raise ValueError("symbols_per_utterance must be positive")

    def frequency(self, symbol: str, offset_hz: float = 0.0) -> float:
        """Frequency of ``symbol``, optionally shifted by a speaker offset."""
        i = self.alphabet.index(symbol)
        n = len(self.alphabet)
        ratio = self.top_freq_hz / self.base_freq_hz
        return self.base_freq_hz * ratio ** (i / (n - 1)) + offset_hz

    def successor(self, symbol: str) -> str:
        i = self.alphabet.index(symbol)
        return self.alphabet[(i + self.successor_stride) % len(self.alphabet)]

    def sequence(self, start: str) -> str:
        """The full transcript implied by a start symbol."""
        if start not in self.alphabet:
            raise ValueError(f"start symbol {start!r} is not in the alphabet")
        out = [start]
        for _ in range(self.symbols_per_utterance - 1):
            out.append(self.successor(out[-1]))
        return "".join(out)

    def synth_wave(
        self, transcript: str, offset_hz: float = 0.0, sample_rate: int = 16000
    ) -> np.ndarray:
        """Render a transcript to audio: one raised-cosine-ramped sine per
        symbol, then trailing silence."""
        seg_n = int(round(self.segment_seconds * sample_rate))
        ramp_n = int(round(self.ramp_seconds * sample_rate))
        t = np.arange(seg_n) / sample_rate
        envelope = np.ones(seg_n)
        if ramp_n > 0:
            ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, math.pi, ramp_n))
            envelope[:ramp_n] = ramp
            envelope[-ramp_n:] = ramp[::-1]
        pieces = []
        for sym in transcript:
            f = self.frequency(sym, offset_hz)
            pieces.append(self.amplitude * envelope * np.sin(2.0 * math.pi * f * t))
        pieces.append(np.zeros(int(round(self.tail_silence_seconds * sample_rate))))
        return np.concatenate(pieces).astype(np.float32)


@dataclass(frozen=True)
class Utterance:
    """One rendered corpus item."""

    wave: np.ndarray
    transcript: str
    sample_rate: int = 16000
    speaker_offset_hz: float = 0.0


@dataclass(frozen=True)
class TrainingExample:
    """Features and targets for one utterance.

    ``prompt`` may carry masking noise when augmentation is on;
    ``continuation`` is always the clean regression target. ``token_ids``
    are the bare transcript ids, with no sentinel tokens attached; the
    training loop adds those when it builds the decoder sequence.
    """

    prompt: np.ndarray
    continuation: np.ndarray
    token_ids: np.ndarray
    transcript: str


def synth_dataset(
    n_utts: int,
    seed: int,
    grammar: ToneGrammar | None = None,
    sample_rate: int = 16000,
) -> list[Utterance]:
    """Render ``n_utts`` utterances, cycling start symbols through the
    alphabet and drawing one speaker frequency offset per utterance.

    Bit-identical output for a given (n_utts, seed, grammar).
    """
    if n_utts < 1:
        raise ValueError(f"n_utts must be at least 1, got {n_utts}")
    g = grammar if grammar is not None else ToneGrammar()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_utts):
        start = g.alphabet[i % len(g.alphabet)]
        transcript = g.sequence(start)
        offset = float(rng.uniform(-g.speaker_offset_hz, g.speaker_offset_hz))
        wave = g.synth_wave(transcript, offset, sample_rate)
        out.append(Utterance(wave, transcript, sample_rate, offset))
    return out


def make_training_example(
    utt: Utterance,
    vocab: Vocabulary,
    frontend: FrontendConfig | None = None,
    augment: AugmentConfig | None = None,
    seed: int = 0,
) -> TrainingExample:
    """Featurize one utterance and split it at the prompt boundary.

    Masking noise, when requested, touches only the prompt half: the
    continuation is the regression target and must stay clean.
    """
    cfg = frontend if frontend is not None else FrontendConfig()
    if utt.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"utterance rate {utt.sample_rate} != frontend rate {cfg.sample_rate}"
        )
    logmel = stft_logmel(utt.wave, cfg)
    prompt, cont = split_prompt(logmel, cfg)
    if augment is not None:
        rng = np.random.default_rng(seed)
        prompt = apply_spec_augment(prompt, augment, rng, fill=cfg.log_floor)
    ids = np.asarray(vocab.encode(utt.transcript), dtype=np.int64)
    return TrainingExample(prompt, cont, ids, utt.transcript)


def corpus_vocab(utts: list[Utterance]) -> Vocabulary:
    return build_vocab(u.transcript for u in utts)


def classify_segments(
    features: np.ndarray,
    grammar: ToneGrammar | None = None,
    frontend: FrontendConfig | None = None,
    margin_frames: int = 4,
    silence_margin: float = 2.0,
) -> list[str | None]:
    """Read tone symbols back out of a log-mel array, one per segment.

    Works on any features whose first frame falls on a segment boundary
    (both the full utterance and the 3-second continuation split qualify).
    Each full segment is pooled over its interior frames, its peak channel
    located, and the nearest symbol's expected channel chosen; segments
    whose peak stays within ``silence_margin`` of the log floor are
    reported as ``None``. Nearest-channel matching absorbs small speaker
    frequency offsets.
    """
    g = grammar if grammar is not None else ToneGrammar()
    cfg = frontend if frontend is not None else FrontendConfig()
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != cfg.mel_channels:
        raise ValueError(f"expected (frames, {cfg.mel_channels}), got {feats.shape}")
    frames_per_seg = int(round(g.segment_seconds * 1000.0 / cfg.frame_step_ms))
    if margin_frames * 2 >= frames_per_seg:
        raise ValueError("margin_frames leaves no interior frames")

    expected = np.array(
        [_tone_channel(g.frequency(s), cfg) for s in g.alphabet], dtype=np.int64
    )
    out: list[str | None] = []
    n_segs = feats.shape[0] // frames_per_seg
    for j in range(n_segs):
        lo = j * frames_per_seg + margin_frames
        hi = (j + 1) * frames_per_seg - margin_frames
        pooled = feats[lo:hi].mean(axis=0)
        peak = int(np.argmax(pooled))
        if pooled[peak] < cfg.log_floor + silence_margin:
            out.append(None)
        else:
            out.append(g.alphabet[int(np.argmin(np.abs(expected - peak)))])
    return out


def _tone_channel(freq_hz: float, cfg: FrontendConfig) -> int:
    """Mel channel a pure tone at freq_hz dominates: the filter with the
    largest weight on the tone's FFT bin."""
    from .audio import mel_filterbank

    fbank = mel_filterbank(cfg)
    bin_idx = int(round(freq_hz * cfg.fft_size / cfg.sample_rate))
    bin_idx = min(bin_idx, fbank.shape[1] - 1)
    return int(np.argmax(fbank[:, bin_idx]))


# -- manifest files -----------------------------------------------------------
#
# One record per line: wav path, then transcript, tab-separated. Paths are
# stored as written; relative paths resolve against the manifest's directory
# when the corpus is loaded.


def write_manifest(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for wav_path, transcript in rows:
            if "\t" in transcript or "\n" in transcript:
                raise ValueError("transcript may not contain tabs or newlines")
            fh.write(f"{wav_path}\t{transcript}\n")


def read_manifest(path: str) -> list[tuple[str, str]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected 'wav<TAB>transcript', got {line!r}"
                )
            out.append((parts[0], parts[1]))
    return out


def load_corpus(
    manifest_path: str, frontend: FrontendConfig | None = None
) -> tuple[list[Utterance], int]:
    """Load every usable record from a manifest.

    Records too short to split at the prompt boundary are skipped, not
    errors: returns (utterances, skipped_count).
    """
    cfg = frontend if frontend is not None else FrontendConfig()
    base = os.path.dirname(os.path.abspath(manifest_path))
    min_samples = cfg.win_samples + cfg.hop_samples * int(
        round(3000.0 / cfg.frame_step_ms)
    )
    kept, skipped = [], 0
    for wav_path, transcript in read_manifest(manifest_path):
        full = wav_path if os.path.isabs(wav_path) else os.path.join(base, wav_path)
        wave = load_wav(full, cfg.sample_rate)
        if wave.shape[0] < min_samples:
            skipped += 1
            continue
        kept.append(Utterance(wave, transcript, cfg.sample_rate))
    return kept, skipped
