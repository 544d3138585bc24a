"""Model construction, attention gates, extraction, saliency, ensembles."""

import numpy as np
import pytest

from perturb import tensor as T
from perturb.models import (
    Model,
    ModelSpec,
    SpecError,
    VariantError,
    attention_gate,
    bilinear_resize,
    build_model,
    default_attention_spec,
    default_predictor_spec,
    ensemble_predict,
    extract_attention,
    forward_logits,
    forward_pass,
    mean_attention_map,
    saliency,
)


def tiny_attention_spec():
    return ModelSpec(conv_channels=(4, 6), pool_after=(1, 2), attention_after=(2,), attention_kernel=3)


def tiny_predictor_spec():
    return ModelSpec(variant="predictor", conv_channels=(4, 6), pool_after=(1, 2), attention_after=())


class TestModelSpec:
    def test_defaults_validate(self):
        assert default_attention_spec().feature_size() == 6
        assert default_predictor_spec().attention_after == ()

    def test_unknown_variant(self):
        with pytest.raises(SpecError, match="variant"):
            ModelSpec(variant="transformer")

    def test_five_stride2_pools_on_48_rejected(self):
        # 48 -> 24 -> 12 -> 6 -> 3: the fifth pool sees an odd extent
        with pytest.raises(SpecError, match="underflow"):
            ModelSpec(
                variant="predictor",
                conv_channels=(4, 4, 4, 4, 4),
                pool_after=(1, 2, 3, 4, 5),
                attention_after=(),
            )

    def test_even_kernel_rejected(self):
        with pytest.raises(SpecError, match="odd"):
            ModelSpec(kernel_size=4)

    def test_attention_classifier_needs_a_gate(self):
        with pytest.raises(SpecError, match="attention site"):
            ModelSpec(attention_after=())

    def test_class_count_is_fixed(self):
        with pytest.raises(SpecError, match="7"):
            ModelSpec(classes=3)

    def test_bad_site_index(self):
        with pytest.raises(SpecError, match="pool_after"):
            ModelSpec(pool_after=(0, 1))


class TestInitAndForward:
    def test_init_deterministic_per_seed(self):
        a = build_model(tiny_attention_spec(), seed=7)
        b = build_model(tiny_attention_spec(), seed=7)
        c = build_model(tiny_attention_spec(), seed=8)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)
        assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)

    def test_biases_start_at_zero(self):
        m = build_model(tiny_attention_spec(), seed=0)
        for name, t in m.params.items():
            if name.endswith(".bias"):
                assert not t.data.any()

    def test_logit_shape(self, rng):
        m = build_model(tiny_attention_spec(), seed=0)
        logits = m.forward(rng.uniform(size=(5, 1, 48, 48)))
        assert logits.shape == (5, 7)

    def test_predictor_has_no_attention_params(self):
        m = build_model(tiny_predictor_spec(), seed=0)
        assert not any(n.startswith("attn") for n in m.params)

    def test_attention_maps_collected_in_unit_interval(self, rng):
        m = build_model(tiny_attention_spec(), seed=1)
        _, maps = m.forward(rng.uniform(size=(2, 1, 48, 48)), collect_attention=True)
        assert len(maps) == 1
        a = maps[0].data
        assert a.shape == (2, 1, 24, 24)
        assert (a > 0).all() and (a < 1).all()

    def test_constant_input_attention_closed_form(self):
        # 1x1 attention conv, w_max=1, w_mean=0, bias 0: on a constant
        # feature map c both pooled channels equal c, so map = sigmoid(c)
        c = 0.7
        feats = T.Tensor(np.full((1, 3, 4, 4), c))
        w = T.Tensor(np.array([[[[1.0]], [[0.0]]]]))
        b = T.Tensor(np.zeros(1))
        gated, amap = attention_gate(feats, w, b, kernel=1)
        expected = 1.0 / (1.0 + np.exp(-c))
        assert np.allclose(amap.data, expected, atol=1e-12)
        assert np.allclose(gated.data, c * expected, atol=1e-12)

    def test_full_model_gradients_nonzero(self, rng):
        m = build_model(tiny_attention_spec(), seed=0)
        loss = T.softmax_cross_entropy(m.forward(rng.uniform(size=(2, 1, 48, 48))), np.array([0, 4]))
        T.backward(loss)
        for name, t in m.params.items():
            assert t.grad is not None and np.abs(t.grad).max() > 0, name
        T.zero_grad(m.params)


class TestBilinear:
    def test_constant_preserved(self):
        out = bilinear_resize(np.full((6, 6), 0.4), 48, 48)
        assert out.shape == (48, 48)
        assert np.allclose(out, 0.4, atol=1e-12)

    def test_identity_when_same_size(self, rng):
        img = rng.uniform(size=(12, 12))
        assert np.allclose(bilinear_resize(img, 12, 12), img, atol=1e-12)

    def test_values_stay_in_hull(self, rng):
        img = rng.uniform(0.2, 0.8, size=(6, 6))
        out = bilinear_resize(img, 48, 48)
        assert out.min() >= 0.2 - 1e-12 and out.max() <= 0.8 + 1e-12


class TestExtractionAndSaliency:
    def test_extract_attention_shape_and_range(self, rng):
        m = build_model(tiny_attention_spec(), seed=3)
        amap = extract_attention(m, rng.uniform(size=(48, 48)))
        assert amap.shape == (48, 48)
        assert (amap > 0).all() and (amap < 1).all()

    def test_extract_attention_rejects_predictor(self, rng):
        m = build_model(tiny_predictor_spec(), seed=3)
        with pytest.raises(VariantError):
            extract_attention(m, rng.uniform(size=(48, 48)))

    def test_mean_attention_matches_manual_mean(self, rng):
        m = build_model(tiny_attention_spec(), seed=2)
        images = rng.uniform(size=(7, 48, 48))
        got = mean_attention_map(m, images, batch_size=3)
        per_image = np.stack([extract_attention(m, img) for img in images])
        assert np.allclose(got, per_image.mean(axis=0), atol=1e-10)

    def test_saliency_normalized_and_params_untouched(self, rng):
        m = build_model(tiny_attention_spec(), seed=0)
        before = m.param_arrays()
        smap = saliency(m, rng.uniform(size=(48, 48)), class_index=2)
        assert smap.shape == (48, 48)
        assert smap.max() == pytest.approx(1.0)
        assert smap.min() >= 0.0
        after = m.param_arrays()
        for name in before:
            assert np.array_equal(before[name], after[name])
        assert all(t.grad is None for t in m.params.values())

    def test_saliency_class_out_of_range(self, rng):
        m = build_model(tiny_attention_spec(), seed=0)
        with pytest.raises(IndexError):
            saliency(m, rng.uniform(size=(48, 48)), class_index=7)

    def test_saliency_zero_model_gives_zero_map(self, rng):
        m = build_model(tiny_predictor_spec(), seed=0)
        for t in m.params.values():
            t.data[...] = 0.0
        smap = saliency(m, rng.uniform(size=(48, 48)), class_index=0)
        assert not smap.any()


class TestEnsembleAndIO:
    def test_ensemble_probs_normalized(self, rng):
        models = [build_model(tiny_predictor_spec(), seed=s) for s in range(3)]
        probs, label = ensemble_predict(models, rng.uniform(size=(48, 48)))
        assert probs.shape == (7,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert label == int(probs.argmax())

    def test_empty_ensemble_rejected(self, rng):
        with pytest.raises(ValueError, match="at least one"):
            ensemble_predict([], rng.uniform(size=(48, 48)))

    def test_single_model_ensemble_matches_forward(self, rng):
        m = build_model(tiny_predictor_spec(), seed=5)
        img = rng.uniform(size=(48, 48))
        probs, _ = ensemble_predict([m], img)
        direct = T.softmax_probs(forward_logits(m, img)[0])
        assert np.allclose(probs, direct, atol=1e-12)

    def test_save_load_round_trip_bit_exact(self, tmp_path, rng):
        m = build_model(tiny_attention_spec(), seed=9)
        p = tmp_path / "model.ckpt"
        m.save(p)
        loaded = Model.load(p)
        assert loaded.spec == m.spec
        for name in m.params:
            assert np.array_equal(loaded.params[name].data, m.params[name].data)
        x = rng.uniform(size=(2, 1, 48, 48))
        assert np.array_equal(loaded.forward(x).data, m.forward(x).data)

    def test_loaded_model_trains(self, tmp_path, rng):
        m = build_model(tiny_predictor_spec(), seed=1)
        p = tmp_path / "m.ckpt"
        m.save(p)
        loaded = Model.load(p)
        loss = T.softmax_cross_entropy(loaded.forward(rng.uniform(size=(2, 1, 48, 48))), np.array([1, 2]))
        T.backward(loss)
        assert loaded.params["head.weight"].grad is not None
