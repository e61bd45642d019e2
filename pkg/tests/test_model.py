"""Encoder/decoder: shapes, causality, coupling, checkpoint round trips."""

import numpy as np
import pytest

from speccont import autodiff as ad
from speccont import model as M
from speccont.autodiff import Tensor
from speccont.checkpoint import load_checkpoint, save_checkpoint
from speccont.losses import ce_loss
from speccont.optim import AdamState

ENC = M.EncoderConfig()
DEC = M.DecoderConfig(vocab_size=11)


@pytest.fixture(scope="module")
def params():
    return M.init_model(ENC, DEC, np.random.default_rng(0))


def rand_prompt(rng, t=240, f=128):
    return rng.standard_normal((t, f)).astype(np.float32)


class TestEncoder:
    def test_shape_240_to_120(self, params):
        out = M.encode_speech(rand_prompt(np.random.default_rng(1)), params, ENC)
        assert out.shape == (120, 64)

    def test_odd_length_ceil(self, params):
        out = M.encode_speech(rand_prompt(np.random.default_rng(2), t=77), params, ENC)
        assert out.shape == (39, 64)

    def test_batched(self, params):
        x = np.random.default_rng(3).standard_normal((2, 240, 128)).astype(np.float32)
        assert M.encode_speech(x, params, ENC).shape == (2, 120, 64)

    def test_zero_input_finite_nonzero(self, params):
        out = M.encode_speech(np.zeros((50, 128), dtype=np.float32), params, ENC)
        assert np.all(np.isfinite(out.data))
        assert np.abs(out.data).sum() > 0  # biases guarantee signal

    def test_frame_permutation_changes_output(self, params):
        rng = np.random.default_rng(4)
        x = rand_prompt(rng, t=50)
        y = x.copy()
        y[[10, 40]] = y[[40, 10]]
        a = M.encode_speech(x, params, ENC).data
        b = M.encode_speech(y, params, ENC).data
        assert not np.allclose(a, b)

    def test_empty_rejected(self, params):
        with pytest.raises(ValueError, match="empty"):
            M.encode_speech(np.zeros((0, 128), dtype=np.float32), params, ENC)

    def test_wrong_mel_count_rejected(self, params):
        with pytest.raises(ad.ShapeMismatchError):
            M.encode_speech(np.zeros((50, 64), dtype=np.float32), params, ENC)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError, match="divisible"):
            M.EncoderConfig(conformer_dim=65)


class TestProjection:
    def test_shape(self, params):
        h = Tensor(np.random.default_rng(5).standard_normal((120, 64)).astype(np.float32))
        assert M.project_to_lm(h, params).shape == (120, DEC.lm_dim)

    def test_identity_init_is_identity(self):
        p = {"proj.w": Tensor(np.eye(64, dtype=np.float32)), "proj.b": Tensor(np.zeros(64, dtype=np.float32))}
        h = Tensor(np.random.default_rng(6).standard_normal((7, 64)).astype(np.float32))
        np.testing.assert_array_equal(M.project_to_lm(h, p).data, h.data)

    def test_dim_mismatch_rejected(self, params):
        with pytest.raises(ad.ShapeMismatchError):
            M.project_to_lm(Tensor(np.zeros((5, 32), dtype=np.float32)), params)

    def test_gradient_flows(self):
        rng = np.random.default_rng(7)
        p = {
            "proj.w": Tensor(rng.standard_normal((8, 8)), requires_grad=True, dtype=np.float64),
            "proj.b": Tensor(np.zeros(8), requires_grad=True, dtype=np.float64),
        }
        h = Tensor(rng.standard_normal((4, 8)), requires_grad=True, dtype=np.float64)
        fn = lambda h, w, b: ad.square(M.project_to_lm(h, {"proj.w": w, "proj.b": b})).sum()
        assert ad.grad_check(fn, [h, p["proj.w"], p["proj.b"]], eps=1e-6) < 1e-6


class TestPrePostNets:
    def test_prenet_shape(self, params):
        out = M.apply_prenet(np.zeros((260, 128), dtype=np.float32), params)
        assert out.shape == (260, DEC.lm_dim)

    def test_bottleneck_structural(self):
        with pytest.raises(ValueError, match="bottleneck"):
            M.DecoderConfig(vocab_size=5, lm_dim=16, prenet_bottleneck_dim=16)
        assert ENC and DEC.prenet_bottleneck_dim < DEC.lm_dim

    def test_distinct_frames_distinct_outputs(self, params):
        rng = np.random.default_rng(8)
        frames = rng.standard_normal((2, 128)).astype(np.float32)
        out = M.apply_prenet(frames, params).data
        assert not np.allclose(out[0], out[1])

    def test_postnet_shape(self, params):
        out = M.apply_postnet(Tensor(np.zeros((9, 64), dtype=np.float32)), params)
        assert out.shape == (9, 128)

    def test_postnet_zero_final_layer(self, params):
        p = dict(params)
        p["postnet.w2"] = Tensor(np.zeros_like(params["postnet.w2"].data))
        p["postnet.b2"] = Tensor(np.zeros_like(params["postnet.b2"].data))
        h = Tensor(np.random.default_rng(9).standard_normal((4, 64)).astype(np.float32))
        np.testing.assert_array_equal(M.apply_postnet(h, p).data, 0.0)

    def test_pre_post_composition_grad(self):
        rng = np.random.default_rng(10)
        names = ["prenet.w1", "prenet.b1", "prenet.w2", "prenet.b2",
                 "postnet.w1", "postnet.b1", "postnet.w2", "postnet.b2"]
        shapes = [(16, 4), (4,), (4, 8), (8,), (8, 12), (12,), (12, 16), (16,)]
        tensors = [Tensor(rng.standard_normal(s) * 0.5, requires_grad=True, dtype=np.float64) for s in shapes]
        x = Tensor(rng.standard_normal((3, 16)), requires_grad=True, dtype=np.float64)

        def fn(x, *ws):
            p = dict(zip(names, ws))
            return ad.square(M.apply_postnet(M.apply_prenet(x, p), p)).sum()

        assert ad.grad_check(fn, [x, *tensors], eps=1e-6) < 1e-6


def small_setup(seed=0, vocab=11):
    enc = M.EncoderConfig(conformer_dim=16, num_blocks=1, attn_heads=2, conv_channels=2, input_mels=16)
    dec = M.DecoderConfig(vocab_size=vocab, lm_dim=16, num_layers=2, attn_heads=2,
                          hidden_dim=32, prenet_bottleneck_dim=4, max_positions=128, output_mels=16)
    params = M.init_model(enc, dec, np.random.default_rng(seed))
    return enc, dec, params


class TestDecoderForward:
    def test_region_bookkeeping(self, params):
        rng = np.random.default_rng(11)
        prefix = Tensor(rng.standard_normal((120, 64)).astype(np.float32))
        ids = np.array([1] + list(rng.integers(3, 11, size=9)))
        frames = rng.standard_normal((30, 128)).astype(np.float32)
        logits, preds = M.decoder_forward(prefix, ids, frames, params, DEC)
        assert logits.shape == (10, 11)
        assert preds.shape == (30, 128)

    def test_empty_frame_region(self, params):
        rng = np.random.default_rng(12)
        prefix = Tensor(rng.standard_normal((120, 64)).astype(np.float32))
        ids = np.array([1, 5, 6])
        logits, preds = M.decoder_forward(prefix, ids, [], params, DEC)
        assert logits.shape == (3, 11) and preds.shape == (0, 128)

    def test_requires_sos(self, params):
        prefix = Tensor(np.zeros((4, 64), dtype=np.float32))
        with pytest.raises(ValueError, match="sos"):
            M.decoder_forward(prefix, np.array([3, 4]), [], params, DEC)

    def test_max_positions_enforced(self):
        enc, dec, p = small_setup()
        prefix = Tensor(np.zeros((4, 16), dtype=np.float32))
        ids = np.array([1] + [3] * 10)
        frames = np.zeros((200, 16), dtype=np.float32)
        with pytest.raises(ValueError, match="max_positions"):
            M.decoder_forward(prefix, ids, frames, p, dec)

    def test_zero_head_uniform_ce(self, params):
        p = dict(params)
        p["head.w"] = Tensor(np.zeros_like(params["head.w"].data))
        p["head.b"] = Tensor(np.zeros_like(params["head.b"].data))
        rng = np.random.default_rng(13)
        prefix = Tensor(rng.standard_normal((20, 64)).astype(np.float32))
        ids = np.array([1, 4, 5, 6])
        logits, _ = M.decoder_forward(prefix, ids, [], p, DEC)
        targets = np.array([4, 5, 6, 2])
        ce = ce_loss(logits, targets).item()
        assert abs(ce / len(targets) - np.log(11)) < 1e-5

    def test_batched_matches_single(self, params):
        rng = np.random.default_rng(14)
        prefix = rng.standard_normal((2, 30, 64)).astype(np.float32)
        ids = np.stack([[1, 3, 4], [1, 5, 6]])
        frames = rng.standard_normal((2, 7, 128)).astype(np.float32)
        bl, bp = M.decoder_forward(Tensor(prefix), ids, frames, params, DEC)
        for i in range(2):
            sl, sp = M.decoder_forward(Tensor(prefix[i]), ids[i], frames[i], params, DEC)
            np.testing.assert_allclose(bl.data[i], sl.data, atol=1e-5)
            np.testing.assert_allclose(bp.data[i], sp.data, atol=1e-5)


class TestCausality:
    def test_future_frame_perturbation_bitwise(self):
        enc, dec, p = small_setup(seed=3)
        rng = np.random.default_rng(15)
        prefix = Tensor(rng.standard_normal((10, 16)).astype(np.float32))
        ids = np.array([1, 4, 5])
        frames = rng.standard_normal((20, 16)).astype(np.float32)
        base_logits, base_preds = M.decoder_forward(prefix, ids, frames, p, dec)
        j = 12
        bumped = frames.copy()
        bumped[j] += 100.0
        logits2, preds2 = M.decoder_forward(prefix, ids, bumped, p, dec)
        # frames[j] enters at frame-region position j+1, so everything
        # through position j must be untouched, bit for bit
        np.testing.assert_array_equal(base_logits.data, logits2.data)
        np.testing.assert_array_equal(base_preds.data[: j + 1], preds2.data[: j + 1])
        assert not np.allclose(base_preds.data[j + 1 :], preds2.data[j + 1 :])

    def test_randomized_perturbations_bitwise(self):
        enc, dec, p = small_setup(seed=4)
        rng = np.random.default_rng(16)
        prefix = Tensor(rng.standard_normal((8, 16)).astype(np.float32))
        ids = np.array([1, 3, 4, 5])
        frames = rng.standard_normal((12, 16)).astype(np.float32)
        base_logits, base_preds = M.decoder_forward(prefix, ids, frames, p, dec)
        for trial in range(10):
            j = int(rng.integers(0, 12))
            bumped = frames.copy()
            bumped[j:] += rng.standard_normal(bumped[j:].shape).astype(np.float32) * 10
            l2, p2 = M.decoder_forward(prefix, ids, bumped, p, dec)
            np.testing.assert_array_equal(base_logits.data, l2.data)
            np.testing.assert_array_equal(base_preds.data[: j + 1], p2.data[: j + 1])

    def test_text_perturbation_keeps_earlier_logits(self):
        enc, dec, p = small_setup(seed=5)
        rng = np.random.default_rng(17)
        prefix = Tensor(rng.standard_normal((8, 16)).astype(np.float32))
        frames = rng.standard_normal((5, 16)).astype(np.float32)
        a, _ = M.decoder_forward(prefix, np.array([1, 3, 4, 5]), frames, p, dec)
        b, _ = M.decoder_forward(prefix, np.array([1, 3, 4, 6]), frames, p, dec)
        np.testing.assert_array_equal(a.data[:3], b.data[:3])
        assert not np.allclose(a.data[3], b.data[3])


class TestAttentionShiftInvariance:
    def test_key_bias_gradient_cancels(self):
        # adding a bias to every key shifts each query's scores by one common
        # constant, and the softmax ignores common shifts: the key-bias
        # gradient cancels to float-level zero while the value bias learns.
        # (This also means central differences cannot check bk — its numeric
        # estimate is pure rounding noise, which is why grad_check takes an
        # absolute tolerance.)
        enc, dec, p = small_setup(seed=6)
        for t in p.values():
            t.data = t.data.astype(np.float64)
        rng = np.random.default_rng(18)
        prefix = M.project_to_lm(
            M.encode_speech(Tensor(rng.standard_normal((40, 16))), p, enc), p)
        ids = np.array([1, 4, 5, 6])
        frames = rng.standard_normal((6, 16))
        logits, preds = M.decoder_forward(prefix, ids, frames, p, dec)
        (logits.sum() + preds.sum()).backward()
        bk = {k: np.abs(v.grad).max() for k, v in p.items() if k.endswith("attn.bk")}
        bv = {k: np.abs(v.grad).max() for k, v in p.items() if k.endswith("attn.bv")}
        assert bk and bv
        assert all(g < 1e-12 for g in bk.values()), bk
        assert all(g > 1e-6 for g in bv.values()), bv


class TestPrefixCoupling:
    def test_zeroed_prefix_changes_outputs(self):
        enc, dec, p = small_setup(seed=6)
        rng = np.random.default_rng(18)
        x = rng.standard_normal((20, 16)).astype(np.float32)
        pre = M.project_to_lm(M.encode_speech(x, p, enc), p)
        ids = np.array([1, 3, 4])
        frames = rng.standard_normal((5, 16)).astype(np.float32)
        a, ap = M.decoder_forward(pre, ids, frames, p, dec)
        z = Tensor(np.zeros_like(pre.data))
        b, bp = M.decoder_forward(z, ids, frames, p, dec)
        assert not np.allclose(a.data, b.data)
        assert not np.allclose(ap.data, bp.data)

    def test_encoder_grads_flow_only_through_prefix(self):
        # backward from a decoder-only loss with a detached prefix must leave
        # every encoder parameter ungradiented: the prefix is the sole coupling
        enc, dec, p = small_setup(seed=7)
        rng = np.random.default_rng(19)
        x = rng.standard_normal((20, 16)).astype(np.float32)
        pre = M.project_to_lm(M.encode_speech(x, p, enc), p).detach()
        logits, preds = M.decoder_forward(pre, np.array([1, 3]), rng.standard_normal((4, 16)).astype(np.float32), p, dec)
        (ad.square(logits).sum() + ad.square(preds).sum()).backward()
        assert all(p[k].grad is None for k in p if k.startswith(("enc.", "proj.")))
        assert p["head.w"].grad is not None


class TestParamBookkeeping:
    def test_count_deterministic(self):
        a = M.init_model(ENC, DEC, np.random.default_rng(1))
        b = M.init_model(ENC, DEC, np.random.default_rng(2))
        assert M.param_count(a) == M.param_count(b)
        assert {k: v.shape for k, v in a.items()} == {k: v.shape for k, v in b.items()}

    def test_groups(self):
        assert M.param_group("enc.block0.ff1.w1") == "enc"
        assert M.param_group("head.b") == "head"
        groups = {M.param_group(k) for k in M.init_model(ENC, DEC, np.random.default_rng(0))}
        assert groups == {"enc", "proj", "embed", "prenet", "dec", "postnet", "head"}

    def test_all_params_finite(self, params):
        assert all(np.all(np.isfinite(t.data)) for t in params.values())


class TestCheckpoint:
    def test_round_trip_values(self, tmp_path, params):
        path = tmp_path / "m.ckpt"
        cfg = {"lm_dim": 64, "vocab_size": 11}
        state = AdamState(step_count=7)
        state.m["head.w"] = np.ones_like(params["head.w"].data)
        state.v["head.w"] = np.full_like(params["head.w"].data, 2.0)
        save_checkpoint(path, params, cfg, step=123, opt_state=state)
        p2, cfg2, step2, st2 = load_checkpoint(path)
        assert cfg2 == cfg and step2 == 123 and st2.step_count == 7
        assert set(p2) == set(params)
        for k in params:
            np.testing.assert_array_equal(p2[k].data, params[k].data)
        np.testing.assert_array_equal(st2.m["head.w"], 1.0)

    def test_byte_identical_resave(self, tmp_path, params):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, params, {"d": 1}, step=5, opt_state=None)
        p2, cfg2, step2, st2 = load_checkpoint(a)
        save_checkpoint(b, p2, cfg2, step2, st2)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_loaded_params_trainable(self, tmp_path, params):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, {}, step=0)
        p2, _, _, _ = load_checkpoint(path)
        assert all(t.requires_grad for t in p2.values())


class TestIncrementalDecode:
    def test_cache_matches_full_forward(self):
        enc, dec, p = small_setup(seed=8)
        rng = np.random.default_rng(20)
        prefix = Tensor(rng.standard_normal((9, 16)).astype(np.float32))
        ids = np.array([1, 3, 4, 5])
        frames = rng.standard_normal((6, 16)).astype(np.float32)
        full_logits, full_preds = M.decoder_forward(prefix, ids, frames, p, dec)

        with ad.no_grad():
            cache = M.DecoderCache(dec.num_layers)
            pb = prefix.reshape((1, 9, 16))
            M.decoder_append(cache, pb, p, dec)
            # text region, one token at a time
            inc_logits = []
            for i, tok in enumerate(ids):
                emb = ad.embedding(p["embed.tok"], np.array([[tok]])) + p["embed.pos"][i]
                h = M.decoder_append(cache, emb, p, dec)
                inc_logits.append((ad.matmul(h, p["head.w"]) + p["head.b"]).data[0, 0])
            # frame region, go then teacher-forced frames
            n = len(ids)
            inc_preds = []
            go = p["embed.go"].reshape((1, 1, 16)) + p["embed.pos"][n]
            h = M.decoder_append(cache, go, p, dec)
            inc_preds.append(M.apply_postnet(h, p).data[0, 0])
            for j in range(len(frames) - 1):
                fin = M.apply_prenet(frames[j : j + 1].reshape(1, 1, 16), p) + p["embed.pos"][n + 1 + j]
                h = M.decoder_append(cache, fin, p, dec)
                inc_preds.append(M.apply_postnet(h, p).data[0, 0])

        np.testing.assert_allclose(np.stack(inc_logits), full_logits.data, atol=1e-5)
        np.testing.assert_allclose(np.stack(inc_preds), full_preds.data, atol=1e-5)

    def test_chunked_append_matches(self):
        enc, dec, p = small_setup(seed=9)
        rng = np.random.default_rng(21)
        seq = Tensor(rng.standard_normal((1, 12, 16)).astype(np.float32))
        whole = M._decoder_stack(seq, p, dec, M._causal_mask(12), None, 0.0)
        with ad.no_grad():
            cache = M.DecoderCache(dec.num_layers)
            a = M.decoder_append(cache, seq[:, :5, :], p, dec)
            b = M.decoder_append(cache, seq[:, 5:, :], p, dec)
        np.testing.assert_allclose(
            np.concatenate([a.data, b.data], axis=1), whole.data, atol=1e-5
        )
