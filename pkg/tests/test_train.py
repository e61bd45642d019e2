"""Training loop: modes, determinism, abort paths, checkpoints, warm starts."""

import csv
import os

import numpy as np
import pytest

from speccont.autodiff import NonFiniteError
from speccont.data import ToneGrammar, synth_dataset
from speccont.model import DecoderConfig, EncoderConfig, param_group
from speccont.optim import lr_schedule
from speccont.train import (
    OBJECTIVE_MODES,
    TrainConfig,
    TrainResult,
    pack_configs,
    train,
    unpack_configs,
)
from speccont.audio import FrontendConfig
from speccont.checkpoint import load_checkpoint
from speccont.text import Vocabulary


def tiny_corpus(n=2):
    return synth_dataset(n, seed=0, grammar=ToneGrammar(symbols_per_utterance=7))


def tiny_enc():
    return EncoderConfig(conformer_dim=16, num_blocks=1, attn_heads=2, conv_channels=4)


def tiny_dec(vocab_size=11):
    return DecoderConfig(
        vocab_size=vocab_size, lm_dim=16, num_layers=1, attn_heads=2,
        hidden_dim=32, prenet_bottleneck_dim=4, max_positions=256,
    )


def run(tmp_path, mode="full", steps=2, **kw):
    cfg = TrainConfig(
        seed=3, max_steps=steps, objective_mode=mode, batch_size=2,
        checkpoint_every=kw.pop("checkpoint_every", 100), **kw,
    )
    return train(tiny_corpus(), cfg, str(tmp_path), tiny_enc(), tiny_dec())


class TestConfigValidation:
    def test_bad_mode(self):
        with pytest.raises(ValueError, match="objective_mode"):
            TrainConfig(seed=0, max_steps=1, objective_mode="everything")

    def test_bad_steps(self):
        with pytest.raises(ValueError, match="max_steps"):
            TrainConfig(seed=0, max_steps=0)

    def test_bad_lambda(self):
        with pytest.raises(ValueError, match="continuation_loss_weight"):
            TrainConfig(seed=0, max_steps=1, continuation_loss_weight=-1.0)

    def test_empty_corpus(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            train([], TrainConfig(seed=0, max_steps=1), str(tmp_path))


class TestModes:
    @pytest.mark.parametrize("mode", OBJECTIVE_MODES)
    def test_mode_runs_and_loss_moves(self, tmp_path, mode):
        r = run(tmp_path, mode=mode, steps=3)
        totals = [h["total"] for h in r.history]
        assert len(totals) == 3
        assert all(np.isfinite(t) for t in totals)
        assert totals[-1] != totals[0]

    def test_lm_only_leaves_encoder_untouched(self, tmp_path):
        r = run(tmp_path, mode="lm_only", steps=2)
        fresh = run(tmp_path / "b", mode="lm_only", steps=2)
        # same seed: untouched groups stay at their random init across runs
        for name, p in r.params.items():
            if param_group(name) in ("enc", "proj", "prenet", "postnet"):
                np.testing.assert_array_equal(p.data, fresh.params[name].data)

    def test_lm_only_ce_only_metrics(self, tmp_path):
        r = run(tmp_path, mode="lm_only", steps=2)
        for h in r.history:
            assert h["recon_s"] == 0.0 and h["recon_t"] == 0.0
            assert h["total"] == h["ce"]

    def test_no_delta_zeroes_delta_terms(self, tmp_path):
        r = run(tmp_path, mode="no_delta", steps=2)
        for h in r.history:
            assert h["recon_f"] == 0.0 and h["recon_t"] == 0.0
            assert h["recon_s"] > 0.0

    def test_no_ce_total_excludes_ce(self, tmp_path):
        r = run(tmp_path, mode="no_ce", steps=2)
        lam = 0.1
        for h in r.history:
            want = lam * (h["recon_s"] + h["recon_f"] + h["recon_t"])
            assert h["total"] == pytest.approx(want, rel=1e-5)
            assert h["ce"] > 0.0  # still logged


class TestDeterminism:
    def test_metrics_bytes_identical(self, tmp_path):
        run(tmp_path / "a", steps=3)
        run(tmp_path / "b", steps=3)
        a = open(tmp_path / "a" / "metrics.csv", "rb").read()
        b = open(tmp_path / "b" / "metrics.csv", "rb").read()
        assert a == b

    def test_checkpoint_bytes_identical(self, tmp_path):
        run(tmp_path / "a", steps=2, checkpoint_every=2)
        run(tmp_path / "b", steps=2, checkpoint_every=2)
        a = open(tmp_path / "a" / "final.ckpt", "rb").read()
        b = open(tmp_path / "b" / "final.ckpt", "rb").read()
        assert a == b

    def test_wall_ms_zeroed_when_deterministic(self, tmp_path):
        r = run(tmp_path, steps=2)
        assert all(h["wall_ms"] == 0.0 for h in r.history)

    def test_wall_ms_measured_otherwise(self, tmp_path):
        r = run(tmp_path, steps=2, deterministic=False)
        assert all(h["wall_ms"] > 0.0 for h in r.history)

    def test_augment_changes_losses_but_stays_deterministic(self, tmp_path):
        a = run(tmp_path / "a", steps=2, augment=True)
        b = run(tmp_path / "b", steps=2, augment=True)
        c = run(tmp_path / "c", steps=2, augment=False)
        assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
        assert a.history[0]["total"] != c.history[0]["total"]


class TestMetricsFile:
    def test_header_and_rows(self, tmp_path):
        r = run(tmp_path, steps=3)
        with open(r.metrics_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "ce", "recon_s", "recon_f", "recon_t",
                           "total", "lr", "wall_ms"]
        assert len(rows) == 4
        assert [row[0] for row in rows[1:]] == ["1", "2", "3"]

    def test_lr_column_matches_schedule(self, tmp_path):
        r = run(tmp_path, steps=3)
        for h in r.history:
            assert h["lr"] == pytest.approx(
                lr_schedule(h["step"], 3.5e-4, 100), rel=1e-9
            )


class TestCheckpoints:
    def test_files_and_best_symlink(self, tmp_path):
        r = run(tmp_path, steps=4, checkpoint_every=2)
        names = sorted(os.listdir(tmp_path))
        assert "step_000002.ckpt" in names and "final.ckpt" in names
        assert os.path.islink(tmp_path / "best.ckpt")
        target = os.readlink(tmp_path / "best.ckpt")
        assert target in ("step_000002.ckpt", "final.ckpt")
        assert r.best_step in (2, 4)

    def test_checkpoint_blob_round_trips(self, tmp_path):
        r = run(tmp_path, steps=2, checkpoint_every=2)
        params, blob, step, opt = load_checkpoint(r.final_checkpoint)
        assert step == 2
        fe, enc, dec, vocab = unpack_configs(blob)
        assert enc == tiny_enc()
        assert dec == tiny_dec()
        assert vocab.symbols == r.vocab.symbols
        assert fe == FrontendConfig()
        assert set(params.keys()) == set(r.params.keys())
        assert opt is not None and opt.step_count == 2

    def test_resume_state_carries_moments(self, tmp_path):
        r = run(tmp_path, steps=2, checkpoint_every=2)
        _, _, _, opt = load_checkpoint(r.final_checkpoint)
        assert set(opt.m.keys()) == set(r.params.keys())


class TestWarmStart:
    def test_decoder_groups_copied(self, tmp_path):
        donor = run(tmp_path / "donor", mode="lm_only", steps=2, checkpoint_every=2)
        warm = run(
            tmp_path / "warm", steps=1,
            init_decoder_from=donor.final_checkpoint,
        )
        cold = run(tmp_path / "cold", steps=1)
        # same seed, so any difference in decoder groups after one identical
        # step can only come from the donor copy
        diffs = [
            name for name in warm.params
            if param_group(name) in ("embed", "dec", "head")
            and not np.array_equal(warm.params[name].data, cold.params[name].data)
        ]
        assert diffs

    def test_encoder_copy_shape_mismatch_rejected(self, tmp_path):
        donor = run(tmp_path / "donor", steps=1, checkpoint_every=1)
        cfg = TrainConfig(
            seed=3, max_steps=1, batch_size=2,
            init_encoder_from=donor.final_checkpoint,
        )
        bigger = EncoderConfig(conformer_dim=32, num_blocks=1, attn_heads=2,
                               conv_channels=4)
        with pytest.raises(ValueError, match="shape"):
            train(tiny_corpus(), cfg, str(tmp_path / "warm"), bigger, tiny_dec())

    def test_missing_checkpoint_rejected(self, tmp_path):
        cfg = TrainConfig(
            seed=3, max_steps=1, batch_size=2,
            init_decoder_from=str(tmp_path / "nope.ckpt"),
        )
        with pytest.raises((FileNotFoundError, OSError)):
            train(tiny_corpus(), cfg, str(tmp_path), tiny_enc(), tiny_dec())


class TestGuards:
    def test_vocab_size_mismatch(self, tmp_path):
        cfg = TrainConfig(seed=3, max_steps=1, batch_size=2)
        with pytest.raises(ValueError, match="vocab_size"):
            train(tiny_corpus(), cfg, str(tmp_path), tiny_enc(), tiny_dec(vocab_size=12))

    def test_nonfinite_param_aborts_with_step(self, tmp_path):
        corpus = tiny_corpus()
        cfg = TrainConfig(seed=3, max_steps=1, batch_size=2)
        enc, dec = tiny_enc(), tiny_dec()
        from speccont import train as train_mod
        real_init = train_mod.init_model

        def poisoned(e, d, rng):
            params = real_init(e, d, rng)
            params["head.w"].data[0, 0] = np.nan
            return params

        train_mod.init_model = poisoned
        try:
            with pytest.raises(NonFiniteError, match="step 1"):
                train(corpus, cfg, str(tmp_path), enc, dec)
        finally:
            train_mod.init_model = real_init

    def test_pack_unpack_round_trip(self):
        enc, dec = tiny_enc(), tiny_dec()
        cfg = TrainConfig(seed=1, max_steps=5)
        vocab = Vocabulary(("<pad>", "<sos>", "<eos>", "a", "b"))
        fe = FrontendConfig()
        import json
        blob = json.loads(json.dumps(pack_configs(enc, dec, cfg, vocab, fe)))
        fe2, enc2, dec2, vocab2 = unpack_configs(blob)
        assert (fe2, enc2, dec2, vocab2.symbols) == (fe, enc, dec, vocab.symbols)
