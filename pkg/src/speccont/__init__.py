"""Spectrogram-domain speech continuation on a numpy substrate.

The package splits into a numeric core (autodiff, optim), an audio frontend
(audio, augment), text handling (text), the encoder/decoder model (model,
checkpoint, losses), and the pipeline around it (data, train, infer,
evaluate, config, cli).
"""

__version__ = "0.1.0"
