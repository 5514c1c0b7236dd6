import numpy as np
import pytest

from duplo import tensor as T
from duplo.layers import INFER, TRAIN
from duplo.model import (CheckpointError, DuploModel, ModelConfig,
                         FULL_PROFILE, SMALL_PROFILE, TINY_PROFILE,
                         VARIANT_CNN, VARIANT_FULL, VARIANT_NOAUX, VARIANT_RNN,
                         WidthProfile, load_checkpoint, save_checkpoint)
from duplo.recurrent import AttentionParams, GruCell
from duplo.rng import SeededRng
from duplo.tensor import ContractError


def tiny_model(variant=VARIANT_FULL, c=3, t_len=4, dropout=0.0, seed=0, dtype=np.float64):
    cfg = ModelConfig(num_classes=c, num_timestamps=t_len, variant=variant,
                      profile=TINY_PROFILE, dropout_rate=dropout)
    return DuploModel(cfg, SeededRng(seed), dtype=dtype)


def batch_for(model, n=2, seed=1):
    cfg = model.config
    return SeededRng(seed).uniform_array(
        (n, cfg.num_timestamps, cfg.num_bands, cfg.patch, cfg.patch),
        dtype=model.dtype)


class TestShapeContracts:
    def test_full_profile_widths(self):
        # Zero-init keeps construction of the full-size model cheap.
        cfg = ModelConfig(num_classes=7, num_timestamps=6, init="zeros")
        model = DuploModel(cfg, SeededRng(0))
        model.set_mode(INFER)
        x = SeededRng(2).uniform_array((2, 6, 5, 5, 5))
        out = model.forward(x)
        assert out["cnn_feat"].shape == (2, 1024)
        assert out["rnn_feat"].shape == (2, 1024)
        assert out["fused_feat"].shape == (2, 2048)
        for key in ("logits_fused", "logits_cnn", "logits_rnn"):
            assert out[key].shape == (2, 7)

    @pytest.mark.parametrize("seed", range(6))
    def test_randomized_shapes(self, seed):
        rng = SeededRng(seed)
        t_len = 1 + rng.randint(12)
        c = 2 + rng.randint(12)
        n = 1 + rng.randint(16)
        cfg = ModelConfig(num_classes=c, num_timestamps=t_len, init="zeros")
        model = DuploModel(cfg, SeededRng(0))
        model.set_mode(INFER)
        out = model.forward(rng.uniform_array((n, t_len, 5, 5, 5)))
        assert out["cnn_feat"].shape == (n, 1024)
        assert out["rnn_feat"].shape == (n, 1024)
        assert out["fused_feat"].shape == (n, 2048)
        for key in ("logits_fused", "logits_cnn", "logits_rnn"):
            assert out[key].shape == (n, c)

    def test_cnn_branch_spatial_collapse(self):
        model = tiny_model()
        model.set_mode(INFER)
        x = batch_for(model)
        stacked = T.Tensor(x.reshape(2, -1, 5, 5))
        y1 = model.cnn_branch.block1.forward(stacked)
        assert y1.shape[2:] == (3, 3)
        y2 = model.cnn_branch.block2.forward(y1)
        assert y2.shape[2:] == (1, 1)
        y3 = model.cnn_branch.block3.forward(y2)
        assert y3.shape[2:] == (1, 1)

    def test_wrong_batch_layout_rejected(self):
        model = tiny_model()
        with pytest.raises(T.ShapeError):
            model.forward(np.zeros((2, 4, 3, 5, 5)))


class TestRnnBranch:
    def test_single_timestamp_equals_gru_state(self):
        model = tiny_model(t_len=1)
        model.set_mode(INFER)
        x = batch_for(model)
        feat, _ = model.rnn_branch_forward(x)
        seq = [model.scnn.forward(T.Tensor(x[:, 0]))]
        h_all = model.gru.unroll(seq)
        assert np.allclose(feat.data, h_all.data[:, 0, :], atol=1e-12)

    def test_scnn_weight_sharing_across_timestamps(self):
        model = tiny_model(t_len=2)
        model.set_mode(INFER)
        x = batch_for(model)
        x[:, 1] = x[:, 0]  # duplicate the timestamp
        f0 = model.scnn.forward(T.Tensor(x[:, 0])).data
        f1 = model.scnn.forward(T.Tensor(x[:, 1])).data
        assert np.array_equal(f0, f1)

    def test_infer_mode_deterministic(self):
        model = tiny_model(dropout=0.4)
        model.set_mode(INFER)
        x = batch_for(model)
        a = model.forward(x)["logits_fused"].data
        b = model.forward(x)["logits_fused"].data
        assert np.array_equal(a, b)


class TestTotalLoss:
    def test_zero_alphas_reduce_to_fused_loss(self):
        model = tiny_model()
        x = batch_for(model)
        y = np.array([0, 2])
        out = model.forward(x)
        full = model.total_loss(out, y, 0.0, 0.0)
        fused_only = T.cross_entropy(out["logits_fused"], y)
        assert full.item() == fused_only.item()

    def test_componentwise_composition(self):
        model = tiny_model()
        x = batch_for(model, n=4)
        y = np.array([0, 1, 2, 0])
        out = model.forward(x)
        total = model.total_loss(out, y, 0.3, 0.3).item()
        parts = (0.3 * T.cross_entropy(out["logits_rnn"], y).item()
                 + 0.3 * T.cross_entropy(out["logits_cnn"], y).item()
                 + T.cross_entropy(out["logits_fused"], y).item())
        assert abs(total - parts) < 1e-6

    def test_unit_alphas_identical_logits_triple_loss(self):
        model = tiny_model()
        x = batch_for(model)
        y = np.array([1, 1])
        out = model.forward(x)
        logits = out["logits_fused"]
        fake = {"logits_fused": logits, "logits_cnn": logits, "logits_rnn": logits}
        total = model.total_loss(fake, y, 1.0, 1.0).item()
        assert abs(total - 3.0 * T.cross_entropy(logits, y).item()) < 1e-10

    def test_negative_alpha_rejected(self):
        model = tiny_model()
        out = model.forward(batch_for(model))
        with pytest.raises(ContractError):
            model.total_loss(out, np.array([0, 1]), -0.1, 0.3)

    def test_noaux_variant_matches_full_with_zero_alphas(self):
        full = tiny_model(variant=VARIANT_FULL, seed=4)
        noaux = tiny_model(variant=VARIANT_NOAUX, seed=4)
        x = batch_for(full)
        y = np.array([0, 1])
        l_full = full.total_loss(full.forward(x), y, 0.0, 0.0).item()
        l_noaux = noaux.total_loss(noaux.forward(x), y, 0.3, 0.3).item()
        assert l_full == l_noaux

    def test_aux_heads_get_zero_gradient_with_zero_alphas(self):
        model = tiny_model()
        x = batch_for(model)
        loss = model.total_loss(model.forward(x), np.array([0, 1]), 0.0, 0.0)
        loss.backward()
        for name, p in model.named_parameters():
            if name.startswith(("head_cnn.", "head_rnn.")):
                assert p.grad is None, name


class TestVariants:
    def test_cnn_only_has_no_rnn_outputs(self):
        model = tiny_model(variant=VARIANT_CNN)
        model.set_mode(INFER)
        out = model.forward(batch_for(model))
        assert "logits_rnn" not in out and "logits_fused" not in out
        assert out["logits_cnn"].shape == (2, 3)

    def test_rnn_only_decides_with_rnn_head(self):
        model = tiny_model(variant=VARIANT_RNN)
        model.set_mode(INFER)
        out = model.forward(batch_for(model))
        assert "logits_cnn" not in out
        assert model.decision_logits(out) is out["logits_rnn"]

    def test_trainable_parameters_respect_variant(self):
        names = dict(tiny_model(variant=VARIANT_NOAUX).trainable_parameters())
        assert not any(n.startswith(("head_cnn.", "head_rnn.")) for n in names)
        names = dict(tiny_model(variant=VARIANT_CNN).trainable_parameters())
        assert not any(n.startswith(("gru.", "attention.", "head_fused.")) for n in names)


class TestPredict:
    def test_argmax(self):
        model = tiny_model()
        model.set_mode(INFER)
        fake = {"logits_fused": T.Tensor(np.array([[0.1, 2.0, -1.0]]))}
        assert np.argmax(model.decision_logits(fake).data, axis=1)[0] == 1

    def test_tie_breaks_to_lowest_index(self):
        assert np.argmax(np.array([[1.0, 1.0, 0.0]]), axis=1)[0] == 0

    def test_requires_infer_mode(self):
        model = tiny_model()
        with pytest.raises(ContractError):
            model.predict(batch_for(model))

    def test_auxiliary_heads_do_not_affect_predictions(self):
        model = tiny_model(seed=5)
        model.set_mode(INFER)
        x = batch_for(model, n=4)
        before = model.predict(x)
        for name, p in model.named_parameters():
            if name.startswith(("head_cnn.", "head_rnn.")):
                p.data = np.zeros_like(p.data)
        assert np.array_equal(model.predict(x), before)

    def test_monotone_transform_invariance(self):
        model = tiny_model(seed=6)
        model.set_mode(INFER)
        out = model.forward(batch_for(model, n=4))
        logits = out["logits_fused"].data
        base = np.argmax(logits, axis=1)
        assert np.array_equal(np.argmax(3.0 * logits + 1.0, axis=1), base)
        assert np.array_equal(np.argmax(np.exp(logits / 2.0), axis=1), base)


class TestExtractFeatures:
    def test_width_and_order(self):
        model = tiny_model()
        model.set_mode(INFER)
        x = batch_for(model)
        feats = model.extract_features(x)
        p = model.config.profile
        assert feats.shape == (2, p.cnn_filters[2] + p.hidden)
        assert np.allclose(feats[:, :p.cnn_filters[2]],
                           model.cnn_branch_forward(x).data, atol=1e-12)


class TestCountParameters:
    def test_attention_at_full_width(self):
        att = AttentionParams(1024, SeededRng(0))
        total = sum(p.data.size for _, p in att.named_parameters())
        assert total == 1024 * 1024 + 1024 + 1024 == 1_050_624

    def test_gru_at_full_width(self):
        gru = GruCell(64, 1024, SeededRng(0))
        total = sum(p.data.size for _, p in gru.named_parameters())
        assert total == 3 * (1024 * 64) + 3 * (1024 * 1024) + 3 * 1024 == 3_345_408

    def test_conv_kernel_arithmetic(self):
        from duplo.layers import Conv2D
        conv = Conv2D(30, 256, 3, SeededRng(0))
        total = sum(p.data.size for _, p in conv.named_parameters())
        assert total == 256 * 30 * 9 + 256 == 69_376

    def test_model_count_is_sum_of_parts(self):
        model = tiny_model()
        assert model.count_parameters() == sum(
            p.data.size for _, p in model.named_parameters())


class TestCheckpoint:
    def test_round_trip_preserves_predictions(self, tmp_path):
        model = tiny_model(dtype=np.float32, dropout=0.4, seed=7)
        model.set_mode(INFER)
        x = batch_for(model, n=4).astype(np.float32)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model, {"note": "probe"})
        loaded, meta = load_checkpoint(path)
        assert meta["note"] == "probe"
        assert np.array_equal(loaded.predict(x), model.predict(x))
        a = loaded.forward(x)["logits_fused"].data
        b = model.forward(x)["logits_fused"].data
        assert np.array_equal(a, b)

    def test_save_is_deterministic(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(p1, model)
        save_checkpoint(p2, model)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(str(path))

    def test_truncated(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        path = str(tmp_path / "t.ckpt")
        save_checkpoint(path, model)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)


class TestProfiles:
    def test_profile_round_trip(self):
        for p in (FULL_PROFILE, SMALL_PROFILE, TINY_PROFILE):
            assert WidthProfile.from_dict(p.to_dict()) == p
