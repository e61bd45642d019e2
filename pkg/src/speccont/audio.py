"""Waveform I/O, log-mel analysis, and Griffin-Lim resynthesis.

All audio is 16 kHz mono.  Analysis frames are 50 ms Hann windows hopped by
12.5 ms with no edge padding, so a waveform of N samples yields exactly
``1 + (N - win) // hop`` frames; one second gives 77.  Mel spectrograms are
float32 arrays of shape (frames, mel_channels) holding log(mel + floor), so
silence sits exactly at log(floor).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "FrontendConfig",
    "load_wav",
    "save_wav",
    "mel_filterbank",
    "mel_center_frequencies",
    "stft_logmel",
    "split_prompt",
    "seconds_to_frames",
    "griffin_lim_invert",
    "save_spectrogram",
    "load_spectrogram",
]


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    frame_length_ms: float = 50.0
    frame_step_ms: float = 12.5
    mel_channels: int = 128
    fmin_hz: float = 20.0
    fmax_hz: float = 8000.0
    fft_size: int = 2048
    energy_floor: float = 1e-3

    @property
    def win_samples(self) -> int:
        return round(self.frame_length_ms * self.sample_rate / 1000.0)

    @property
    def hop_samples(self) -> int:
        return round(self.frame_step_ms * self.sample_rate / 1000.0)

    @property
    def log_floor(self) -> float:
        return float(np.log(self.energy_floor))


# -- WAV files ----------------------------------------------------------------


def load_wav(path: str | Path, expected_rate: int = 16000) -> np.ndarray:
    """Read 16-bit PCM mono WAV into float32 in [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit samples, got {8 * f.getsampwidth()}-bit")
        if f.getframerate() != expected_rate:
            raise ValueError(f"{path}: expected {expected_rate} Hz, got {f.getframerate()} Hz")
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def save_wav(path: str | Path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    """Write float samples as 16-bit PCM mono WAV, clipping to [-1, 1]."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = (clipped * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


# -- mel analysis -------------------------------------------------------------


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular mel weights, shape (mel_channels, fft_size // 2 + 1).

    Unit-peak triangles on the mel scale between fmin and fmax.  The FFT size
    must give fine enough bin spacing that every triangle catches at least
    one bin; an all-zero row would silence that channel irrecoverably.
    """
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin_hz), _hz_to_mel(cfg.fmax_hz), cfg.mel_channels + 2))
    weights = np.zeros((cfg.mel_channels, n_bins))
    for m in range(cfg.mel_channels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    if np.any(weights.sum(axis=1) == 0.0):
        raise ValueError(
            f"fft_size {cfg.fft_size} too coarse: some mel channels catch no FFT bin"
        )
    return weights.astype(np.float32)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    """Peak frequency in Hz of each mel triangle."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin_hz), _hz_to_mel(cfg.fmax_hz), cfg.mel_channels + 2))
    return edges[1:-1]


def _hann(win: int) -> np.ndarray:
    # periodic form, the STFT convention
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)


def _frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        raise ValueError(f"waveform of {n_samples} samples is shorter than one {win}-sample frame")
    return 1 + (n_samples - win) // hop


def _stft(x: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    win, hop = cfg.win_samples, cfg.hop_samples
    t = _frame_count(len(x), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    return np.fft.rfft(x[idx] * _hann(win), n=cfg.fft_size, axis=1)


def _istft(spec: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    win, hop = cfg.win_samples, cfg.hop_samples
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :win]
    window = _hann(win)
    length = (spec.shape[0] - 1) * hop + win
    out = np.zeros(length)
    norm = np.zeros(length)
    for k in range(spec.shape[0]):
        s = k * hop
        out[s : s + win] += frames[k] * window
        norm[s : s + win] += window * window
    # normalize only where windows overlap meaningfully; dividing by the
    # vanishing edge taper would amplify edge samples without bound under
    # repeated stft/istft passes
    safe = norm > 1e-3
    out[safe] /= norm[safe]
    return out


def stft_logmel(samples: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Waveform -> log-mel spectrogram, float32 (frames, mel_channels)."""
    mag = np.abs(_stft(np.asarray(samples, dtype=np.float64), cfg))
    mel = mag @ mel_filterbank(cfg).T.astype(np.float64)
    return np.log(mel + cfg.energy_floor).astype(np.float32)


def seconds_to_frames(seconds: float, cfg: FrontendConfig) -> int:
    return int(round(seconds * 1000.0 / cfg.frame_step_ms))


def split_prompt(
    logmel: np.ndarray, cfg: FrontendConfig, prompt_seconds: float = 3.0
) -> tuple[np.ndarray, np.ndarray]:
    """Split at the frame whose window starts exactly at prompt_seconds.

    Utterances that cannot supply both a full prompt and at least one
    continuation frame are rejected rather than padded.
    """
    cut = seconds_to_frames(prompt_seconds, cfg)
    if logmel.shape[0] <= cut:
        raise ValueError(
            f"utterance has {logmel.shape[0]} frames but the {prompt_seconds:g}-second "
            f"prompt needs {cut} plus at least one continuation frame"
        )
    return logmel[:cut], logmel[cut:]


# -- resynthesis --------------------------------------------------------------


def griffin_lim_invert(logmel: np.ndarray, cfg: FrontendConfig, n_iters: int = 60) -> np.ndarray:
    """Log-mel -> waveform via mel pseudo-inverse plus Griffin-Lim phase.

    The mel weights are inverted by a per-channel normalized transpose: each
    channel's energy spreads uniformly back over its triangle.  Phase starts
    at zero and is refined deterministically; peak-normalized only when the
    result would clip.
    """
    basis = mel_filterbank(cfg).astype(np.float64)
    inv_basis = (basis / np.maximum(basis.sum(axis=1, keepdims=True), 1e-8)).T
    mel = np.maximum(np.exp(np.asarray(logmel, dtype=np.float64)) - cfg.energy_floor, 0.0)
    mag = mel @ inv_basis.T
    phase = np.ones_like(mag, dtype=np.complex128)
    for _ in range(n_iters):
        rebuilt = _stft(_istft(mag * phase, cfg), cfg)
        phase = rebuilt / np.maximum(np.abs(rebuilt), 1e-8)
    out = _istft(mag * phase, cfg)
    peak = np.abs(out).max()
    if peak > 1.0:
        out = out / peak
    return out.astype(np.float32)


# -- spectrogram container ----------------------------------------------------


def save_spectrogram(path: str | Path, logmel: np.ndarray, cfg: FrontendConfig) -> None:
    """One ASCII header line "frames channels frame_step_ms", then raw
    row-major little-endian float32."""
    arr = np.ascontiguousarray(logmel, dtype="<f4")
    header = f"{arr.shape[0]} {arr.shape[1]} {cfg.frame_step_ms:g}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(arr.tobytes())


def load_spectrogram(path: str | Path) -> tuple[np.ndarray, float]:
    """Returns (logmel float32 array, frame_step_ms)."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) != 3:
            raise ValueError(f"{path}: header must be 'frames channels frame_step_ms'")
        t, c, step_ms = int(header[0]), int(header[1]), float(header[2])
        payload = f.read()
    expect = t * c * 4
    if len(payload) != expect:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, header implies {expect}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, c).copy(), step_ms
