import numpy as np
import pytest

from falformer import numerics as nx
from falformer.clustering import SegmentAssignment
from falformer.errors import CheckpointError, ConfigError, ShapeError
from falformer.model import (
    ModelConfig,
    forward,
    init_params,
    load_checkpoint,
    param_shapes,
    predict,
    save_checkpoint,
    softmax,
)


def small_config(**kw):
    base = dict(d_f=6, d_model=8, layers=2, segments=4, heads=2)
    base.update(kw)
    return ModelConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(layers=0), dict(segments=0), dict(n_classes=1),
                                     dict(heads=3), dict(attention_mode="linear")])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            small_config(**bad)

    def test_defaults(self):
        c = ModelConfig(d_f=32)
        assert (c.layers, c.d_model, c.segments) == (2, 768, 256)

    def test_text_round_trip(self):
        c = small_config(attention_mode="nystrom", pinv_iters=9, cluster_space="raw")
        assert ModelConfig.from_text(c.to_text()) == c


class TestInit:
    def test_deterministic(self):
        c = small_config()
        a, b = init_params(c, 3), init_params(c, 3)
        for name in a:
            assert a[name].tobytes() == b[name].tobytes()

    def test_gamma_beta(self):
        p = init_params(small_config(), 0)
        for name, value in p.items():
            if name.endswith(".gamma"):
                np.testing.assert_array_equal(value, 1.0)
            if name.endswith(".beta"):
                np.testing.assert_array_equal(value, 0.0)

    def test_fan_in_bound(self):
        c = small_config(d_model=32, heads=4)
        for name, value in init_params(c, 1).items():
            if name.endswith(("weight", ".wq", ".wk", ".wv", ".wo")):
                assert np.abs(value).max() <= np.sqrt(6.0 / value.shape[0])

    def test_shapes(self):
        c = small_config()
        p = init_params(c)
        assert {k: v.shape for k, v in p.items()} == param_shapes(c)


class TestForward:
    @pytest.mark.parametrize("mode", ["exact", "nystrom", "falsa"])
    def test_hidden_rows(self, rng, mode):
        c = small_config(attention_mode=mode)
        x = rng.normal(size=(11, 6))
        t = forward(x, init_params(c), c)
        assert len(t.hidden) == c.layers + 1
        assert all(h.shape == (12, 8) for h in t.hidden)
        assert np.isfinite(t.logits).all()

    @pytest.mark.parametrize("mode", ["exact", "nystrom", "falsa"])
    def test_single_token_bag(self, rng, mode):
        c = small_config(attention_mode=mode)
        t = forward(rng.normal(size=(1, 6)), init_params(c), c)
        assert np.isfinite(t.logits).all()
        if mode == "falsa":
            assert t.assignment.n_segments == 1

    def test_d_f_mismatch(self, rng):
        c = small_config()
        with pytest.raises(ShapeError):
            forward(rng.normal(size=(4, 5)), init_params(c), c)

    def test_falsa_matches_exact_when_segments_cover_tokens(self, rng):
        x = rng.normal(size=(4, 6))
        params = init_params(small_config(), 5)
        exact = forward(x, params, small_config(attention_mode="exact")).logits
        falsa = forward(x, params, small_config(attention_mode="falsa", oracle_pinv=True)).logits
        np.testing.assert_allclose(falsa, exact, atol=1e-4)

    def test_shuffle_invariance_exact(self, rng):
        c = small_config(attention_mode="exact")
        p = init_params(c, 2)
        x = rng.normal(size=(15, 6))
        perm = rng.permutation(15)
        np.testing.assert_allclose(forward(x[perm], p, c).logits, forward(x, p, c).logits, atol=1e-9)

    def test_shuffle_invariance_falsa_lockstep(self, rng):
        c = small_config(attention_mode="falsa")
        p = init_params(c, 2)
        x = rng.normal(size=(15, 6))
        ids = rng.integers(0, 4, size=15)
        perm = rng.permutation(15)
        a = forward(x, p, c, SegmentAssignment.from_ids(ids)).logits
        b = forward(x[perm], p, c, SegmentAssignment.from_ids(ids[perm])).logits
        np.testing.assert_allclose(b, a, atol=1e-9)

    def test_residual_integrity(self, rng):
        c = small_config(attention_mode="falsa")
        p = init_params(c, 4)
        for i in range(c.layers):
            p[f"layers.{i}.attn.wo"] = np.zeros_like(p[f"layers.{i}.attn.wo"])
        t = forward(rng.normal(size=(9, 6)), p, c)
        np.testing.assert_array_equal(t.hidden[-1], t.hidden[0])
        cls = nx.layer_norm(p["cls_token"][None], p["final_norm.gamma"], p["final_norm.beta"])
        expected = (cls @ p["classifier.weight"] + p["classifier.bias"])[0]
        np.testing.assert_array_equal(t.logits, expected)

    def test_deterministic(self, rng):
        c = small_config()
        p = init_params(c, 1)
        x = rng.normal(size=(20, 6))
        assert forward(x, p, c).logits.tobytes() == forward(x, p, c).logits.tobytes()

    def test_cluster_once_by_default(self, rng):
        c = small_config()
        t = forward(rng.normal(size=(20, 6)), init_params(c), c)
        assert t.layers[0].assignment is t.layers[1].assignment

    def test_no_quadratic_allocation(self, rng):
        c = ModelConfig(d_f=8, d_model=16, layers=1, segments=64, heads=1, attention_mode="falsa")
        p = init_params(c)
        x = rng.normal(size=(8192, 8))
        with nx.track_allocations() as rep:
            t = forward(x, p, c, retain=False)
        assert np.isfinite(t.logits).all()
        assert rep.peak_bytes < 0.1 * 8192 * 8192 * 8


class TestPredict:
    def test_zero_classifier_is_uniform(self, rng):
        c = small_config()
        p = init_params(c)
        p["classifier.weight"] = np.zeros_like(p["classifier.weight"])
        p["classifier.bias"] = np.zeros_like(p["classifier.bias"])
        label, probs = predict(rng.normal(size=(5, 6)), p, c)
        np.testing.assert_array_equal(probs, [0.5, 0.5])
        assert label == 0

    def test_probs_sum_and_argmax(self, rng):
        c = small_config(n_classes=5)
        p = init_params(c, 9)
        for _ in range(5):
            label, probs = predict(rng.normal(size=(7, 6)), p, c)
            assert abs(probs.sum() - 1.0) <= 1e-12
            best = 0
            for i in range(len(probs)):
                if probs[i] > probs[best]:
                    best = i
            assert label == best

    def test_softmax_tie_lowest_index(self):
        assert int(np.argmax(softmax(np.array([1.0, 3.0, 3.0])))) == 1


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        from falformer.training import OptimizerState

        c = small_config(attention_mode="nystrom")
        p = init_params(c, 7)
        opt = OptimizerState.for_params(p, lr=3e-4)
        opt.step = 17
        r = np.random.default_rng(0)
        for name in p:
            opt.m[name] = r.normal(size=p[name].shape)
            opt.v[name] = r.random(size=p[name].shape)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, c, p, opt)
        c2, p2, opt2 = load_checkpoint(path)
        assert c2 == c
        for name in p:
            assert p2[name].tobytes() == p[name].tobytes()
            assert opt2.m[name].tobytes() == opt.m[name].tobytes()
            assert opt2.v[name].tobytes() == opt.v[name].tobytes()
        assert opt2.step == 17 and opt2.hyperparams() == opt.hyperparams()
        save_checkpoint(tmp_path / "again.ckpt", c2, p2, opt2)
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_header_is_readable(self, tmp_path):
        c = small_config()
        save_checkpoint(tmp_path / "m.ckpt", c, init_params(c))
        head = (tmp_path / "m.ckpt").read_bytes()[:200]
        assert head.startswith(b"FALFORMER-CKPT\nversion=1\n")
        assert b"d_model=8" in head

    def test_truncated(self, tmp_path):
        c = small_config()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, c, init_params(c))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_and_garbage(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.ckpt")
        (tmp_path / "junk").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk")
