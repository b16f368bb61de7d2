import numpy as np
import pytest
import torch

from peloc import net
from peloc.errors import ConfigError, ShapeError, VocabError
from peloc.net import (LoraAdapter, ModelConfig, NF4_LEVELS, build_model, dequantize_nf4,
                       lora_apply, nf4_max_gap, quantize_nf4, trainable_parameters)
from peloc.windowing import WindowExample, WindowSpec, BoundaryKind, tokenize
from peloc.core import PhaseKind


def tiny_cfg(**kw):
    base = dict(d_model=32, n_layers=2, n_heads=4, audio_stride=10, quantize_base=False,
                lora_rank=0, head_only=True)
    base.update(kw)
    return ModelConfig(**base)


def example(seed=0, frames=60, transcript="therapist: begin now"):
    rng = np.random.default_rng(seed)
    mel = rng.normal(-10.0, 8.0, size=(frames, 64)).astype(np.float32)
    spec = WindowSpec("s", 0.0, 30.0, PhaseKind.P2, BoundaryKind.START)
    return WindowExample(spec=spec, audio=mel,
                         transcript_tokens=tokenize(transcript),
                         prompt_tokens=tokenize("find the start"),
                         target_offset=0.37, t_abs=10.0)


class TestNF4Codebook:
    def test_structure(self):
        levels = NF4_LEVELS
        assert len(levels) == 16
        assert np.all(np.diff(levels) > 0)
        assert levels[0] == -1.0 and levels[-1] == 1.0
        assert 0.0 in levels
        # published NormalFloat codebook: 7 strictly negative, 8 strictly positive
        assert (levels < 0).sum() == 7 and (levels > 0).sum() == 8
        assert levels[net.NF4_ZERO_CODE] == 0.0

    def test_max_gap_by_scan(self):
        gaps = [NF4_LEVELS[i + 1] - NF4_LEVELS[i] for i in range(15)]
        assert nf4_max_gap() == max(gaps)


class TestQuantizeNF4:
    def test_all_zero_block(self):
        q = quantize_nf4(np.zeros((8, 8)))
        assert np.all(q.scales == 0.0)
        assert np.array_equal(dequantize_nf4(q), np.zeros((8, 8)))

    def test_absmax_exact_round_trip(self):
        w = np.linspace(-0.5, 0.9, 64)
        q = quantize_nf4(w)
        deq = dequantize_nf4(q)
        idx = np.argmax(np.abs(w))
        assert deq[idx] == pytest.approx(w[idx], abs=1e-7)

    def test_round_trip_error_bound(self):
        rng = np.random.default_rng(0)
        half_gap = nf4_max_gap() / 2
        for _ in range(200):
            w = rng.normal(0, rng.uniform(0.01, 3.0), size=64)
            q = quantize_nf4(w)
            err = np.abs(w - dequantize_nf4(q))
            assert err.max() <= q.scales[0] * half_gap + 1e-12

    def test_shape_preserved_and_blocking(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(5, 40))  # 200 elements: 3 blocks of 64 + remainder
        q = quantize_nf4(w)
        assert q.shape == (5, 40)
        assert len(q.scales) == 4
        assert dequantize_nf4(q).shape == (5, 40)

    def test_codes_are_packed_nibbles(self):
        q = quantize_nf4(np.ones(64))
        assert q.codes.dtype == np.uint8
        assert len(q.codes) == 32

    def test_idempotent_requantization(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=128)
        once = dequantize_nf4(quantize_nf4(w))
        twice = dequantize_nf4(quantize_nf4(once))
        assert np.array_equal(once, twice)


class TestLora:
    def test_hand_computed_1d(self):
        adapter = LoraAdapter(1, 1, rank=1, alpha=2.0, dropout=0.0)
        with torch.no_grad():
            adapter.A.copy_(torch.tensor([[0.5]]))
            adapter.B.copy_(torch.tensor([[2.0]]))
        out = lora_apply(torch.tensor([[1.0]]), torch.tensor([1.0]), adapter)
        assert float(out.detach()) == pytest.approx(3.0)

    def test_fresh_adapter_contributes_nothing(self):
        adapter = LoraAdapter(8, 8, rank=4, alpha=8.0, dropout=0.0)
        W = torch.eye(8)
        x = torch.arange(8, dtype=torch.float32)
        assert torch.equal(lora_apply(W, x, adapter), W @ x)

    def test_scale_rank_independent(self):
        for r in (2, 4, 8):
            adapter = LoraAdapter(16, 16, rank=r, alpha=2.0 * r, dropout=0.1)
            assert adapter.scale == 2.0

    def test_shape_mismatch(self):
        adapter = LoraAdapter(4, 4, rank=2, alpha=4.0, dropout=0.0)
        with pytest.raises(ShapeError):
            lora_apply(torch.eye(3), torch.ones(3), adapter)

    def test_dropout_only_in_training(self):
        torch.manual_seed(0)
        adapter = LoraAdapter(64, 64, rank=8, alpha=16.0, dropout=0.5)
        with torch.no_grad():
            adapter.B.normal_()
        x = torch.ones(64)
        W = torch.zeros(64, 64)
        eval_a = lora_apply(W, x, adapter, training=False)
        eval_b = lora_apply(W, x, adapter, training=False)
        assert torch.equal(eval_a, eval_b)
        train_a = lora_apply(W, x, adapter, training=True)
        train_b = lora_apply(W, x, adapter, training=True)
        assert not torch.equal(train_a, train_b)


class TestConfig:
    def test_alpha_is_twice_rank(self):
        for r in (2, 4, 8):
            assert ModelConfig(lora_rank=r).lora_alpha == 2 * r

    def test_invalid_head_dims(self):
        with pytest.raises(ConfigError):
            tiny_cfg(d_model=30).validate()

    def test_no_trainable_body(self):
        with pytest.raises(ConfigError):
            ModelConfig(lora_rank=0, head_only=False).validate()

    def test_head_only_excludes_adapters(self):
        with pytest.raises(ConfigError):
            ModelConfig(lora_rank=4, head_only=True).validate()


class TestTrainableParameters:
    def test_head_only_set(self):
        model = build_model(tiny_cfg(), base_seed=3)
        names = set(trainable_parameters(model))
        assert names and all(n.startswith("head.") for n in names)

    def test_lora_set_includes_adapters(self):
        model = build_model(tiny_cfg(lora_rank=4, head_only=False), base_seed=3)
        names = set(trainable_parameters(model))
        adapters = {n for n in names if ".adapter." in n}
        assert len(adapters) == 2 * 2 * 2  # layers x (q,v) x (A,B)
        assert {n for n in names if n.startswith("head.")}
        assert not any(".base." in n for n in adapters)

    def test_rank_scaling_ratio(self):
        def adapter_count(r):
            model = build_model(tiny_cfg(lora_rank=r, head_only=False), base_seed=0)
            return sum(p.numel() for n, p in trainable_parameters(model).items()
                       if ".adapter." in n)

        assert adapter_count(8) == 4 * adapter_count(2)

    def test_head_count_independent_of_rank(self):
        def head_count(**kw):
            model = build_model(tiny_cfg(**kw), base_seed=0)
            return sum(p.numel() for n, p in trainable_parameters(model).items()
                       if n.startswith("head."))

        assert head_count() == head_count(lora_rank=8, head_only=False)

    def test_frozen_base_receives_no_gradients(self):
        model = build_model(tiny_cfg(lora_rank=2, head_only=False), base_seed=1)
        net.finalize_base(model)
        out = model(example())
        out.backward()
        for name, p in model.named_parameters():
            if name in trainable_parameters(model):
                assert p.grad is not None
            else:
                assert p.grad is None, name


class TestForward:
    def test_output_in_unit_interval(self):
        model = build_model(tiny_cfg(), base_seed=0)
        for seed in range(5):
            out = float(model(example(seed)))
            assert 0.0 < out < 1.0

    def test_deterministic_in_eval_mode(self):
        model = build_model(tiny_cfg(lora_rank=8, head_only=False), base_seed=2)
        model.eval()
        ex = example(3)
        assert float(model(ex)) == float(model(ex))

    def test_padding_invariance(self):
        model = build_model(tiny_cfg(), base_seed=4)
        model.eval()
        ex = example(5)
        base = model(ex, pad_to=None)
        padded_a = model(ex, pad_to=300)
        padded_b = model(ex, pad_to=333)
        assert torch.equal(base, padded_a)
        assert torch.equal(padded_a, padded_b)

    def test_vocab_error(self):
        model = build_model(tiny_cfg(), base_seed=0)
        ex = example()
        ex.prompt_tokens = np.array([999], dtype=np.int64)
        with pytest.raises(VocabError):
            model(ex)

    def test_lora_init_identity(self):
        bare = build_model(tiny_cfg(), base_seed=7)
        for r in (2, 4, 8):
            lora = build_model(tiny_cfg(lora_rank=r, head_only=False), base_seed=7)
            lora.eval(), bare.eval()
            for seed in range(5):
                ex = example(seed)
                assert abs(float(lora(ex)) - float(bare(ex))) < 1e-6

    def test_head_output_range_over_random_params(self):
        torch.manual_seed(0)
        head = net.RegressionHead(16)
        for _ in range(200):
            for p in head.parameters():
                p.data.normal_(0, 2.0)
            out = float(head(torch.randn(16)))
            assert 0.0 < out < 1.0


class TestQuantizedForward:
    def test_layerwise_error_bound(self):
        # quantization error through one linear layer stays under the
        # propagated elementwise bound
        rng = np.random.default_rng(0)
        W = rng.normal(0, 0.1, size=(32, 64))
        x = rng.normal(size=64)
        q = quantize_nf4(W)
        deq = dequantize_nf4(q)
        err_bound_elem = np.repeat(q.scales, 64)[:W.size].reshape(W.shape) * (nf4_max_gap() / 2)
        bound = err_bound_elem @ np.abs(x)
        actual = np.abs(W @ x - deq @ x)
        assert np.all(actual <= bound + 1e-9)

    def test_quantize_base_weights(self):
        model = build_model(tiny_cfg(quantize_base=True), base_seed=5)
        before = {n: model.get_submodule(n).weight.detach().clone()
                  for n in net.base_module_names(model)}
        net.finalize_base(model)
        assert set(model.quantized) == set(net.base_module_names(model))
        for name, q in model.quantized.items():
            after = model.get_submodule(name).weight.detach()
            assert torch.allclose(after, torch.from_numpy(dequantize_nf4(q)))
            diff = (after - before[name]).abs().max()
            assert 0 < diff < nf4_max_gap()  # changed, but boundedly

    def test_forward_still_valid_after_quantization(self):
        model = build_model(tiny_cfg(quantize_base=True, lora_rank=2, head_only=False), base_seed=6)
        net.finalize_base(model)
        out = float(model.predict(example()))
        assert 0.0 < out < 1.0


class TestCheckpoint:
    def test_round_trip_predictions(self, tmp_path):
        model = build_model(tiny_cfg(lora_rank=4, head_only=False, quantize_base=True), base_seed=9)
        net.finalize_base(model)
        with torch.no_grad():  # make tuned weights nontrivial
            for p in trainable_parameters(model).values():
                p.add_(torch.randn_like(p) * 0.05)
        ex = example(11)
        want = model.predict(ex)
        net.save_checkpoint(tmp_path / "ckpt", model, base_seed=9, extra={"window": 30.0})
        loaded, meta = net.load_checkpoint(tmp_path / "ckpt")
        assert meta["window"] == 30.0
        assert loaded.predict(ex) == pytest.approx(want, abs=1e-6)

    def test_adapters_stored_separately(self, tmp_path):
        model = build_model(tiny_cfg(lora_rank=4, head_only=False), base_seed=9)
        net.finalize_base(model)
        net.save_checkpoint(tmp_path / "ckpt", model, base_seed=9)
        tuned = dict(np.load(tmp_path / "ckpt" / "tuned.npz"))
        base = dict(np.load(tmp_path / "ckpt" / "base.npz"))
        assert any(".adapter." in k for k in tuned)
        assert any(k.startswith("head.") for k in tuned)
        assert not any(".adapter." in k or k.startswith("head.") for k in base)

    def test_version_check(self, tmp_path):
        model = build_model(tiny_cfg(), base_seed=1)
        net.save_checkpoint(tmp_path / "ckpt", model, base_seed=1)
        cfg_path = tmp_path / "ckpt" / "config.json"
        import json
        meta = json.loads(cfg_path.read_text())
        meta["version"] = 99
        cfg_path.write_text(json.dumps(meta))
        with pytest.raises(ConfigError):
            net.load_checkpoint(tmp_path / "ckpt")
