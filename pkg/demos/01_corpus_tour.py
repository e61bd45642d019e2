"""A walk through the synthetic corpus, from waveform to features and back.

Run:  python3 demos/01_corpus_tour.py
"""

import numpy as np

from speccont.audio import FrontendConfig, split_prompt, stft_logmel
from speccont.data import ToneGrammar, classify_segments, synth_dataset

frontend = FrontendConfig()
grammar = ToneGrammar()

print("The grammar walks a ladder of eight tones; each symbol's successor is")
print("three steps up, wrapping around, so one start symbol fixes the whole")
print("utterance:\n")
for start in grammar.alphabet[:3]:
    print(f"  start {start!r} -> {grammar.sequence(start)}")

print("\nSymbol frequencies (Hz):")
for s in grammar.alphabet:
    print(f"  {s}: {grammar.frequency(s):7.1f}")

utts = synth_dataset(4, seed=7)
u = utts[0]
print(f"\nRendered {len(utts)} utterances; each is {u.wave.shape[0]} samples")
print(f"({u.wave.shape[0] / u.sample_rate:.1f} s), transcript {u.transcript!r},")
print(f"speaker offset {u.speaker_offset_hz:+.1f} Hz.")

logmel = stft_logmel(u.wave, frontend)
print(f"\nLog-mel features: {logmel.shape[0]} frames x {logmel.shape[1]} channels")
print(f"(50 ms window, 12.5 ms hop). Values span [{logmel.min():.2f}, {logmel.max():.2f}];")
print(f"pure silence sits exactly at the log floor {frontend.log_floor:.3f}.")

prompt, cont = split_prompt(logmel, frontend)
print(f"\nThe 3-second split: prompt {prompt.shape[0]} frames, continuation "
      f"{cont.shape[0]} frames.")
print("240 prompt frames = 6 whole segments, so the continuation starts")
print("exactly on a symbol boundary.")

print("\nReading the symbols back from the features alone:")
full = classify_segments(logmel, grammar, frontend)
tail = classify_segments(cont, grammar, frontend)
print(f"  full utterance : {''.join(s or '.' for s in full)}  (truth {u.transcript})")
print(f"  continuation   : {''.join(s or '.' for s in tail)}  (truth {u.transcript[6:]})")

agreement = sum(a == b for a, b in zip(full, u.transcript))
print(f"\n{agreement}/{len(u.transcript)} segments classified correctly, "
      "speaker offset and all.")
