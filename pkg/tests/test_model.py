import numpy as np
import pytest
import torch

from autopet_lab.model import (CheckpointError, FoldModel, ModelCheckpoint, ModelConfig, build_model,
                               count_parameters, desk_config, expected_parameter_count, load_checkpoint,
                               full_scale_config, save_checkpoint)
from autopet_lab.losses import LossConfig, combined_loss
from autopet_lab.preprocessing import CTNormStats, NormalizationMode, NormalizationRecord

RECORD = NormalizationRecord(NormalizationMode.CT_SCHEME_BOTH, CTNormStats(1.0, 2.0, -3.0, 4.0, 10),
                             CTNormStats(0.5, 1.5, 0.0, 9.0, 10))
TINY = ModelConfig(n_stages=2, features_per_stage=(4, 8), blocks_per_stage_encoder=(1, 1), patch_size=(8, 8, 8))


class TestConfig:
    def test_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(patch_size=(30, 32, 32))

    def test_bottleneck_too_small(self):
        with pytest.raises(ValueError, match="bottleneck"):
            ModelConfig(n_stages=2, features_per_stage=(4, 8), blocks_per_stage_encoder=(1, 1), patch_size=(2, 2, 2))

    def test_list_lengths(self):
        with pytest.raises(ValueError):
            ModelConfig(n_stages=3)

    def test_feature_cap_and_order(self):
        with pytest.raises(ValueError, match="cap"):
            ModelConfig(features_per_stage=(8, 16, 32, 640))
        with pytest.raises(ValueError, match="non-decreasing"):
            ModelConfig(features_per_stage=(16, 8, 32, 64))

    def test_full_scale_dry_run(self):
        cfg = full_scale_config()
        assert cfg.patch_size == (192, 192, 192) and cfg.n_stages == 6
        with torch.device("meta"):
            model = build_model(cfg)
        assert count_parameters(model) == expected_parameter_count(cfg)
        x = torch.empty(1, 2, 192, 192, 192, device="meta")
        assert tuple(model(x).shape) == (1, 2, 192, 192, 192)


class TestShapesAndDeterminism:
    def test_desk_forward_shape(self):
        model = build_model(desk_config()).eval()
        with torch.no_grad():
            out = model(torch.zeros(2, 2, 32, 32, 32))
        assert tuple(out.shape) == (2, 2, 32, 32, 32)
        assert torch.isfinite(out).all()
        p = torch.softmax(out, 1).sum(1)
        assert torch.allclose(p, torch.ones_like(p), atol=1e-6)

    def test_same_seed_same_parameters(self):
        a, b = build_model(TINY), build_model(TINY)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)
        c = build_model(ModelConfig(**{**TINY.to_dict(), "rng_seed": 1}))
        assert not torch.equal(a.head.weight, c.head.weight)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_model(TINY)(torch.zeros(1, 2, 16, 16, 16))

    def test_random_configs(self):
        rng = np.random.default_rng(0)
        for _ in range(6):
            n = int(rng.integers(2, 4))
            feats = tuple(sorted(int(f) for f in rng.integers(2, 8, size=n)))
            div = 2 ** (n - 1)
            patch = tuple(div * int(k) for k in rng.integers(2, 4, size=3))
            cfg = ModelConfig(n_stages=n, features_per_stage=feats, blocks_per_stage_encoder=(1,) * n,
                              patch_size=patch, rng_seed=int(rng.integers(100)))
            model = build_model(cfg).eval()
            with torch.no_grad():
                out = model(torch.randn(1, 2, *patch))
            assert tuple(out.shape[2:]) == patch
            assert count_parameters(model) == expected_parameter_count(cfg)

    def test_no_cross_sample_leakage(self):
        model = build_model(desk_config()).double().eval()
        x = torch.randn(1, 2, 32, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        with torch.no_grad():
            single = model(x)
            double = model(torch.cat([x, x]))
            mixed = model(torch.cat([x, torch.randn_like(x)]))
        assert torch.equal(double[0], double[1])
        assert torch.allclose(mixed[0], single[0], rtol=0, atol=1e-10)

    def test_deep_supervision_outputs(self):
        cfg = ModelConfig(deep_supervision=True)
        model = build_model(cfg).train()
        outs = model(torch.zeros(1, 2, 32, 32, 32))
        assert [tuple(o.shape[2:]) for o in outs] == [(32,) * 3, (16,) * 3, (8,) * 3]
        assert count_parameters(model) == expected_parameter_count(cfg)
        model.eval()
        assert tuple(model(torch.zeros(1, 2, 32, 32, 32)).shape) == (1, 2, 32, 32, 32)


class TestParameterCount:
    def test_hand_count_two_stage(self):
        cfg = ModelConfig(n_stages=2, features_per_stage=(4, 8), blocks_per_stage_encoder=(1, 1),
                          patch_size=(8, 8, 8))
        stage0 = (27 * 2 * 4 + 4) + 8 + (27 * 4 * 4 + 4) + 8 + (2 * 4 + 4) + 8        # 692
        stage1 = (27 * 4 * 8 + 8) + 16 + (27 * 8 * 8 + 8) + 16 + (4 * 8 + 8) + 16     # 2696
        decoder = (8 * 8 * 4 + 4) + (27 * 8 * 4 + 4) + 8 + (27 * 4 * 4 + 4) + 8         # 1580
        head = 4 * 2 + 2
        assert (stage0, stage1, decoder) == (692, 2696, 1580)
        assert count_parameters(build_model(cfg)) == stage0 + stage1 + decoder + head == 4978

    def test_hand_count_two_blocks(self):
        cfg = ModelConfig(n_stages=2, features_per_stage=(4, 8), blocks_per_stage_encoder=(2, 1),
                          patch_size=(8, 8, 8))
        extra_block = (27 * 4 * 4 + 4) + 8 + (27 * 4 * 4 + 4) + 8   # identity skip, no projection
        assert count_parameters(build_model(cfg)) == 4978 + extra_block == expected_parameter_count(cfg)


class TestEquivariance:
    def _model(self):
        cfg = ModelConfig(n_stages=2, features_per_stage=(4, 8), blocks_per_stage_encoder=(1, 1),
                          patch_size=(48, 48, 48))
        return build_model(cfg).double().eval()

    def test_constant_input_gives_stride_periodic_interior(self):
        model = self._model()
        with torch.no_grad():
            y = model(torch.full((1, 2, 48, 48, 48), 0.3, dtype=torch.float64))
        core = y[..., 16:32, 16:32, 16:32]
        for axis in (2, 3, 4):
            assert torch.equal(core, torch.roll(core, 2, dims=axis))

    @pytest.mark.parametrize("shift", [2, 4])
    def test_shift_equivariance_on_constant_background(self, shift):
        model = self._model()
        x = torch.full((1, 2, 48, 48, 48), 0.3, dtype=torch.float64)
        x[..., 22:25, 22:25, 22:25] = 2.0
        with torch.no_grad():
            a = model(x)
            b = model(torch.roll(x, shift, dims=2))
        diff = (torch.roll(a, shift, dims=2) - b)[..., 12:36, 12:36, 12:36]
        assert float(diff.abs().max()) < 1e-9


def test_parameter_gradients_match_finite_differences():
    model = build_model(TINY).double().train()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 2, 8, 8, 8, generator=g, dtype=torch.float64)
    t = (torch.rand(2, 8, 8, 8, generator=g) < 0.3).long()
    cfg = LossConfig()

    def loss():
        return combined_loss(model(x), t, cfg, from_logits=True)

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    analytic, numeric = [], []
    h = 1e-6
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
            analytic.append(p.grad.view(-1)[i].item())
            numeric.append((up - down) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n)) < 1e-3


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, tmp_path):
        model = build_model(desk_config(rng_seed=3))
        ckpt = ModelCheckpoint.from_model(model, "BASELINE", RECORD, fold_index=2, n_folds=5)
        path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
        back = load_checkpoint(path)
        assert back.training_strategy_id == "BASELINE" and back.fold_index == 2
        assert back.normalization.to_json() == RECORD.to_json()
        probe = np.random.default_rng(0).normal(size=(1, 2, 32, 32, 32)).astype(np.float32)
        assert np.array_equal(model.predict_proba(probe), FoldModel(back).predict_proba(probe))

    def test_missing_normalization(self, tmp_path):
        with pytest.raises(CheckpointError):
            ModelCheckpoint.from_model(build_model(TINY), "BASELINE", None, 0)
        ckpt = ModelCheckpoint.from_model(build_model(TINY), "BASELINE", RECORD, 0)
        path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
        raw = open(path, "rb").read()
        patched = raw.replace(b'"normalization": {', b'"normalization": null, "x": {', 1)
        import struct
        hlen = struct.unpack("<Q", raw[8:16])[0]
        fixed = raw[:8] + struct.pack("<Q", hlen + len(patched) - len(raw)) + patched[16:]
        open(tmp_path / "bad.ckpt", "wb").write(fixed)
        with pytest.raises(CheckpointError, match="normalization"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_fold_index_validation(self):
        with pytest.raises(CheckpointError):
            ModelCheckpoint.from_model(build_model(TINY), "BASELINE", RECORD, fold_index=5, n_folds=5)
        with pytest.raises(CheckpointError):
            ModelCheckpoint.from_model(build_model(TINY), "BASELINE", RECORD, fold_index=-1, n_folds=5)

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"garbage bytes here")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.ckpt")
        ckpt = ModelCheckpoint.from_model(build_model(TINY), "BASELINE", RECORD, 0)
        path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
        raw = open(path, "rb").read()
        (tmp_path / "trunc.ckpt").write_bytes(raw[:-100])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "trunc.ckpt")

    def test_shape_mismatch(self, tmp_path):
        ckpt = ModelCheckpoint.from_model(build_model(TINY), "BASELINE", RECORD, 0)
        ckpt.config = ModelConfig(n_stages=2, features_per_stage=(4, 16), blocks_per_stage_encoder=(1, 1),
                                  patch_size=(8, 8, 8))
        path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="shapes"):
            load_checkpoint(path)
