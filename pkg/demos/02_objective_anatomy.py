"""What the joint objective sees, term by term, on one real example.

Run:  python3 demos/02_objective_anatomy.py
"""

import numpy as np

from speccont.autodiff import Tensor
from speccont.data import corpus_vocab, make_training_example, synth_dataset
from speccont.losses import ce_loss, recon_loss, total_loss
from speccont.model import (
    DecoderConfig,
    EncoderConfig,
    decoder_forward,
    encode_speech,
    init_model,
    param_count,
    project_to_lm,
)

corpus = synth_dataset(2, seed=0)
vocab = corpus_vocab(corpus)
enc_cfg = EncoderConfig()
dec_cfg = DecoderConfig(vocab_size=len(vocab.symbols))
params = init_model(enc_cfg, dec_cfg, np.random.default_rng(0))
print(f"Model: {param_count(params):,} parameters, vocabulary {vocab.symbols}")

ex = make_training_example(corpus[0], vocab)
print(f"\nExample: prompt {ex.prompt.shape}, continuation {ex.continuation.shape},")
print(f"transcript {ex.transcript!r} -> ids {ex.token_ids.tolist()}")

print("\nThe decoder consumes one mixed sequence:")
print("  [120 encoded prompt positions | sos + 10 token embeddings |")
print("   go + 180 prenet-compressed frames]")
print("and is trained to emit the 11 text targets (tokens then the end")
print("marker) and all 181 continuation frames, each position seeing only")
print("what came before it.")

prefix = project_to_lm(encode_speech(Tensor(ex.prompt), params, enc_cfg), params)
text_in = np.concatenate([[vocab.sos_id], ex.token_ids])
text_tgt = np.concatenate([ex.token_ids, [vocab.eos_id]])
logits, preds = decoder_forward(prefix, text_in, ex.continuation, params, dec_cfg)

ce = ce_loss(logits, text_tgt)
s, f, t, recon = recon_loss(Tensor(ex.continuation), preds, order=3)
total = total_loss(ce, recon, 0.1)

print(f"\nAt random init:")
print(f"  text cross entropy        {ce.item():10.3f}   (~ ln{len(vocab.symbols)} "
      f"= {np.log(len(vocab.symbols)):.3f} per token x {len(text_tgt)} targets)")
print(f"  frame regression          {s.item():10.1f}")
print(f"  frequency-delta term      {f.item():10.1f}")
print(f"  time-delta terms (k=1..3) {t.item():10.1f}")
print(f"  weighted total            {total.item():10.1f}   (ce + 0.1 * recon)")

print("\nThe delta terms compare differences between neighboring frames and")
print("channels, so a model that nails every cell but smears transitions")
print("still pays. They dominate early; the balance shifts as training")
print("sharpens the predictions.")
