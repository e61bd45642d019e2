"""Train a small model until it can finish a tone sentence, then let it.

Takes a few minutes on a laptop-class CPU. Run:
    python3 demos/03_train_and_continue.py [steps]
"""

import os
import sys
import tempfile

import numpy as np

from speccont.audio import save_wav
from speccont.data import classify_segments, make_training_example, synth_dataset
from speccont.infer import infer
from speccont.train import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000

corpus = synth_dataset(8, seed=0)
print(f"Corpus: {len(corpus)} utterances, transcripts "
      f"{[u.transcript for u in corpus[:3]]}...")

out_dir = tempfile.mkdtemp(prefix="speccont_demo_")
cfg = TrainConfig(seed=3, max_steps=steps, batch_size=8, peak_lr=1e-3,
                  checkpoint_every=1000, deterministic=False)
print(f"\nTraining {steps} steps (metrics stream to {out_dir}/metrics.csv)...")
result = train(corpus, cfg, out_dir)
for h in result.history:
    if h["step"] % 500 == 0 or h["step"] == 1:
        print(f"  step {h['step']:5d}  ce {h['ce']:8.4f}  total {h['total']:10.2f}")

print("\nNow hand the trained model only the first 3 seconds of an utterance")
print("and ask for the rest.")
ex = make_training_example(corpus[0], result.vocab)
res = infer(result.params, result.enc_cfg, result.dec_cfg, result.vocab,
            ex.prompt, max_text=16, max_frames=250, synthesize=True)

print(f"\n  truth       : {corpus[0].transcript!r}")
print(f"  transcribed : {res.transcript!r}  (stop: {res.text_stop})")
segs = classify_segments(res.frames)
print(f"  frames      : {res.frames.shape[0]} emitted (stop: {res.frame_stop})")
print(f"  heard as    : {''.join(s or '.' for s in segs)!r}"
      f"  (truth {corpus[0].transcript[6:]!r} then silence)")

wav_path = os.path.join(out_dir, "continuation.wav")
save_wav(wav_path, res.wave, 16000)
print(f"\nGriffin-Lim rendering of the continuation written to {wav_path}")
