import math

import numpy as np
import pytest

from mbf import tensor as T
from mbf.losses import adversarial_loss
from mbf.model import (ArchConfig, CheckpointMismatchError, ConfigError, MlpSpec, apply_dropout,
                       forward_classify, forward_discriminate, init_model, load_checkpoint,
                       read_checkpoint, save_checkpoint)
from mbf.tensor import Tensor, grad_check

from conftest import toy_arch


class TestInit:
    def test_default_bag_of_words_dimensions(self):
        m = init_model(ArchConfig(), num_domains=4, num_classes=2, rng_seed=0)
        assert m.classifier_input_dim == 192
        assert m.discriminator_input_dim == 128
        assert m.shared.dims == [5000, 1000, 500, 128]
        assert all(p.dims == [5000, 1000, 500, 64] for p in m.private)
        assert m.classifier.dims == [192, 192, 2]
        assert m.discriminator.dims == [128, 128, 4]

    def test_toy_dimensions(self):
        arch = ArchConfig(input_dim=10, hidden_dims=[8], shared_dim=4, private_dim=2)
        assert init_model(arch, 2, 2).classifier_input_dim == 6

    def test_deterministic(self):
        a = init_model(toy_arch(), 2, 2, rng_seed=9).state_dict()
        b = init_model(toy_arch(), 2, 2, rng_seed=9).state_dict()
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_uniform_fan_in_and_zero_bias(self):
        m = init_model(ArchConfig(input_dim=400, hidden_dims=[50], shared_dim=8, private_dim=4), 2, 2)
        W, b = m.shared.layers[0]
        assert np.abs(W.data).max() <= 1 / math.sqrt(400)
        assert np.abs(W.data).max() > 0.9 / math.sqrt(400)
        assert not b.data.any()

    def test_private_extractors_independent(self):
        m = init_model(toy_arch(), 3, 2)
        assert not np.array_equal(m.private[0].layers[0][0].data, m.private[1].layers[0][0].data)

    @pytest.mark.parametrize("kwargs", [dict(input_dim=0), dict(hidden_dims=[8, 0]), dict(shared_dim=0)])
    def test_zero_dimension(self, kwargs):
        with pytest.raises(ConfigError):
            init_model(ArchConfig(**{**vars(toy_arch()), **kwargs}), 2, 2)

    def test_too_few_domains_or_classes(self):
        with pytest.raises(ConfigError):
            init_model(toy_arch(), 1, 2)
        with pytest.raises(ConfigError):
            init_model(toy_arch(), 2, 1)

    def test_mlp_spec_dropout_range(self):
        with pytest.raises(ConfigError):
            MlpSpec(3, [2], 1, dropout_rate=1.0)


class TestForward:
    def setup_method(self):
        self.x = np.random.default_rng(1).poisson(1.0, size=(5, 10)).astype(float)

    @pytest.mark.parametrize("domain", [0, 1, 2])
    def test_shapes_and_normalization(self, domain):
        m = init_model(toy_arch(), 3, 4)
        out = m.forward(Tensor(self.x), domain)
        assert out.class_log_probs.shape == (5, 4)
        assert out.domain_log_probs.shape == (5, 3)
        assert out.shared_features.shape == (5, 4)
        assert out.private_features.shape == (5, 2)
        for lp in (out.class_log_probs.data, out.domain_log_probs.data):
            assert np.all(lp <= 0)
            np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-9)

    def test_zero_classifier_head_is_uniform(self, toy_model):
        W, b = toy_model.classifier.layers[-1]
        W.data[:] = 0.0
        lp = forward_classify(toy_model, self.x, 0).data
        np.testing.assert_allclose(lp, math.log(0.5), atol=1e-15)

    def test_zero_discriminator_head_is_uniform(self):
        m = init_model(toy_arch(), 4, 2)
        m.discriminator.layers[-1][0].data[:] = 0.0
        np.testing.assert_allclose(forward_discriminate(m, self.x).data, math.log(0.25), atol=1e-15)

    def test_domains_differ(self, toy_model):
        a = forward_classify(toy_model, self.x, 0).data
        b = forward_classify(toy_model, self.x, 1).data
        assert not np.allclose(a, b)

    def test_domain_out_of_range(self, toy_model):
        with pytest.raises(IndexError):
            forward_classify(toy_model, self.x, 2)

    def test_deterministic(self):
        a = forward_classify(init_model(toy_arch(), 2, 2, 3), self.x, 1).data
        b = forward_classify(init_model(toy_arch(), 2, 2, 3), self.x, 1).data
        assert a.tobytes() == b.tobytes()

    def test_discriminator_nll_reaches_shared_extractor(self, toy_model):
        def f():
            return adversarial_loss(forward_discriminate(toy_model, self.x), np.array([0, 1, 0, 1, 1]))

        shared = [p for _, p in toy_model.shared.named_parameters()]
        report = grad_check(f, shared, step=1e-5, tol=1e-4)
        assert report.passed, report
        toy_model.zero_grad()
        f().backward()
        assert any(np.abs(p.grad).max() > 0 for p in shared)

    def test_model_gradients_pass_grad_check(self, toy_model):
        def f():
            return T.sum_all(T.mul(forward_classify(toy_model, self.x, 1),
                                   Tensor(np.arange(10.0).reshape(5, 2))))

        report = grad_check(f, toy_model.feature_parameters(), step=1e-5, tol=1e-4)
        assert report.passed, report


class TestDropout:
    def test_rate_zero(self):
        x = Tensor(np.ones((3, 3)))
        assert apply_dropout(x, 0.0, np.random.default_rng(0), training=True) is x

    def test_eval_mode(self):
        x = Tensor(np.ones((3, 3)))
        assert apply_dropout(x, 0.7, None, training=False) is x

    def test_survivor_fraction(self):
        x = Tensor(np.ones((1, 100_000)))
        out = apply_dropout(x, 0.4, np.random.default_rng(0), training=True).data
        assert abs((out > 0).mean() - 0.6) < 0.01
        np.testing.assert_allclose(out[out > 0], 1 / 0.6)

    def test_rate_one(self):
        with pytest.raises(ConfigError):
            apply_dropout(Tensor([[1.0]]), 1.0, np.random.default_rng(0), True)

    def test_backward_uses_mask(self):
        x = Tensor(np.ones((1, 1000)), requires_grad=True)
        out = apply_dropout(x, 0.5, np.random.default_rng(1), training=True)
        T.sum_all(out).backward()
        np.testing.assert_array_equal(x.grad, out.data)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, toy_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(toy_model, path)
        other = init_model(toy_arch(), 2, 2, rng_seed=42)
        load_checkpoint(other, path)
        for (n1, p1), (n2, p2) in zip(toy_model.named_parameters(), other.named_parameters()):
            assert n1 == n2
            assert p1.data.tobytes() == p2.data.tobytes()

    def test_header_layout(self, tmp_path, toy_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(toy_model, path)
        raw = path.read_bytes()
        lines = raw.split(b"\n")
        params = list(toy_model.named_parameters())
        assert lines[0] == b"MBF-CHECKPOINT 1"
        assert lines[1] == f"params {len(params)}".encode()
        assert lines[2] == b"shared.0.weight 10 8"
        assert lines[2 + len(params)] == b"end"
        header_len = sum(len(ln) + 1 for ln in lines[:3 + len(params)])
        payload = raw[header_len:]
        assert len(payload) == 8 * sum(p.data.size for _, p in params)
        first = np.frombuffer(payload[:8 * 80], dtype="<f8").reshape(10, 8)
        np.testing.assert_array_equal(first, toy_model.shared.layers[0][0].data)

    def test_mismatch_names_parameter(self, tmp_path, toy_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(toy_model, path)
        wider = init_model(ArchConfig(input_dim=12, hidden_dims=[8], shared_dim=4, private_dim=2), 2, 2)
        with pytest.raises(CheckpointMismatchError) as err:
            load_checkpoint(wider, path)
        assert err.value.name == "shared.0.weight"

    def test_truncated(self, tmp_path, toy_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(toy_model, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            read_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"hello\nworld\n")
        with pytest.raises(ValueError):
            read_checkpoint(path)
