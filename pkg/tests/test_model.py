import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samdetr import autodiff as ad
from samdetr.gradsuite import MICRO_CONFIG, run_model_check
from samdetr.model import DecoderLayer, EncodedFeatures, ModelConfig, SAMDETRModel, pixel_centers, smca_bias
from samdetr.nn import sinusoidal_embed_2d

SMALL = dict(d=16, n_heads=4, n_queries=4, enc_layers=1, dec_layers=2, n_classes=3, image_size=32, stride=8)


def small(variant="sam", **kw):
    return ModelConfig(**{**SMALL, "variant": variant, **kw})


def image(seed=0, size=32):
    return np.random.default_rng(seed).uniform(size=(3, size, size))


def zero_box_heads(model):
    for head in (model.head, getattr(model, "aux_head", None)):
        if head is not None:
            for p in head.box.parameters():
                p.assign(np.zeros(p.shape))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="dino")
    with pytest.raises(ValueError):
        ModelConfig(d=24, n_heads=8)
    with pytest.raises(ValueError):
        ModelConfig(image_size=60, stride=8)


def test_encoder_shape_at_defaults():
    model = SAMDETRModel(ModelConfig(variant="baseline", enc_layers=1, dec_layers=1))
    enc = model.encode(image(0, 64))
    assert enc.features.shape == (8, 8, 64)


def test_encode_is_deterministic():
    model = SAMDETRModel(small())
    a = model.encode(image(1)).features.data
    b = model.encode(image(1)).features.data
    assert np.array_equal(a, b)
    other = SAMDETRModel(small(), seed=0).encode(image(1)).features.data
    assert np.array_equal(a, other)


def test_zero_image_with_zero_biases_is_reproducible():
    runs = []
    for _ in range(2):
        model = SAMDETRModel(small("baseline"))
        for conv in model.backbone:
            conv.bias.assign(np.zeros(conv.bias.shape))
        runs.append(model.encode(np.zeros((3, 32, 32))).features.data)
    assert np.array_equal(*runs)


def test_encode_rejects_bad_images():
    model = SAMDETRModel(small())
    with pytest.raises(ad.DimensionError):
        model.encode(np.zeros((1, 32, 32)))
    with pytest.raises(ad.DimensionError):
        model.encode(np.zeros((3, 64, 64)))


@pytest.mark.parametrize("variant", ["baseline", "sam", "sam_smca"])
def test_forward_shapes(variant):
    cfg = small(variant)
    out = SAMDETRModel(cfg).forward(image(2))
    assert len(out) == cfg.dec_layers
    for layer in out.layers:
        assert layer.logits.shape == (4, 3)
        assert layer.boxes.shape == (4, 4)
        assert layer.attention.shape == (4, 4, 16)
        if variant != "baseline":
            assert layer.points_image.shape == (4, 4, 2)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["baseline", "sam", "sam_smca"]))
def test_boxes_always_valid(seed, variant):
    model = SAMDETRModel(small(variant), seed=seed)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.assign(p.data + rng.normal(size=p.shape) * 0.5)
    out = model.forward(image(seed))
    assert np.all((out.reference_boxes >= 0) & (out.reference_boxes <= 1))
    for layer in out.layers:
        assert np.all((layer.boxes.data >= 0) & (layer.boxes.data <= 1))
        w = layer.attention
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("variant", ["baseline", "sam", "sam_smca"])
def test_zero_box_head_reproduces_reference_boxes(variant):
    model = SAMDETRModel(small(variant), seed=3)
    zero_box_heads(model)
    out = model.forward(image(3))
    for layer in out.layers:
        assert np.array_equal(layer.boxes.data, out.reference_boxes)


def test_box_center_monotone_in_delta():
    model = SAMDETRModel(small("baseline"), seed=4)
    zero_box_heads(model)
    last = model.head.box.layers[-1]
    cxs = []
    for delta in np.linspace(-30, 30, 41):
        bias = np.zeros(4)
        bias[0] = delta
        last.bias.assign(bias)
        cxs.append(model.forward(image(4)).final.boxes.data[:, 0])
    cxs = np.array(cxs)
    assert np.all(np.diff(cxs, axis=0) >= 0)
    assert np.all(cxs[-1] > 1 - 1e-12) and np.all(cxs[0] < 1e-12)


def test_single_key_baseline_ignores_query_values():
    cfg = ModelConfig(d=8, n_heads=2, n_queries=3, enc_layers=0, dec_layers=1, n_classes=2,
                      image_size=8, stride=8, variant="baseline")
    layer = DecoderLayer(cfg)
    layer.reset_parameters(5)
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(1, 1, 8))
    enc = EncodedFeatures(ad.tensor(feats), sinusoidal_embed_2d(pixel_centers(1, 1), 8).data)
    outs = []
    for q in (rng.normal(size=(3, 8)), rng.normal(size=(3, 8)) * 10):
        ca, w = layer.cross_attn(ad.tensor(q), None, enc.flat, ad.tensor(enc.pos2d.reshape(1, 8)), enc.flat)
        assert np.array_equal(w.data, np.ones((2, 3, 1)))
        outs.append(ca.data)
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-14)
    np.testing.assert_allclose(outs[0], np.tile(outs[0][:1], (3, 1)), atol=1e-14)


# -- SMCA bias ----------------------------------------------------------------------------


def test_smca_bias_peaks_at_center():
    keys = pixel_centers(4, 4).reshape(-1, 2)
    centers = ad.tensor(keys[[5]][None])  # N=1, M=1 at a key center
    bias = smca_bias(centers, ad.tensor([[0.3]]), keys).data
    assert bias.shape == (1, 1, 16)
    assert bias[0, 0, 5] == 0.0
    assert np.argmax(bias[0, 0]) == 5
    assert np.all(np.delete(bias[0, 0], 5) < 0)


def test_smca_bias_vanishes_for_large_scale():
    keys = pixel_centers(8, 8).reshape(-1, 2)
    centers = ad.tensor(np.random.default_rng(6).uniform(size=(3, 2, 2)))
    bias = smca_bias(centers, ad.tensor(np.full((3, 2), 1e6)), keys).data
    assert np.max(np.abs(bias)) < 1e-11


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 2 * np.pi), st.floats(0.01, 2.0))
def test_smca_bias_decays_along_rays(cx, cy, angle, scale):
    r = np.linspace(0, 1.5, 30)
    keys = np.column_stack([cx + r * np.cos(angle), cy + r * np.sin(angle)])
    bias = smca_bias(ad.tensor([[[cx, cy]]]), ad.tensor([[scale]]), keys).data[0, 0]
    assert np.all(np.diff(bias) <= 0)
    logits = np.zeros(30) + bias
    weights = np.exp(logits - logits.max())
    assert np.all(np.diff(weights) <= 0)


def test_smca_bias_gradient():
    rng = np.random.default_rng(7)
    keys = pixel_centers(3, 3).reshape(-1, 2)
    centers = ad.tensor(rng.uniform(size=(2, 2, 2)), requires_grad=True)
    scales = ad.tensor(rng.uniform(0.2, 1.0, size=(2, 2)), requires_grad=True)
    w = rng.normal(size=(2, 2, 9))

    def fn():
        return ad.reduce_sum(ad.mul(smca_bias(centers, scales, keys), w))

    assert ad.gradcheck(fn, [centers, scales]) < 1e-6


# -- variants ------------------------------------------------------------------------------


def test_avg_without_reweight_is_reproducible():
    cfg = small("sam", strategy="avg", reweight=False)
    a = SAMDETRModel(cfg, seed=8).forward(image(8))
    b = SAMDETRModel(cfg, seed=8).forward(image(8))
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.logits.data, lb.logits.data)
        assert np.array_equal(la.boxes.data, lb.boxes.data)


def test_baseline_and_sam_share_shapes():
    a = SAMDETRModel(small("baseline")).forward(image(9))
    b = SAMDETRModel(small("sam")).forward(image(9))
    for la, lb in zip(a.layers, b.layers):
        assert la.logits.shape == lb.logits.shape and la.boxes.shape == lb.boxes.shape


def test_parameter_names_are_stable():
    names = [n for n, _ in SAMDETRModel(small("sam_smca")).named_parameters()]
    assert len(names) == len(set(names))
    assert "reference_logits" in names
    assert any(n.startswith("decoder.0.aligner.") for n in names)
    assert any(n.startswith("decoder.1.smca_scale.") for n in names)


def test_smca_initial_scale():
    model = SAMDETRModel(small("sam_smca"))
    b = model.decoder[0].smca_scale.bias.data
    np.testing.assert_allclose(np.log1p(np.exp(b)), 0.2, atol=1e-12)


@pytest.mark.parametrize("variant", ["baseline", "sam", "sam_smca"])
def test_micro_end_to_end_gradient(variant):
    result = run_model_check(0, ModelConfig(**{**MICRO_CONFIG.__dict__, "variant": variant}))
    assert result.max_rel_error < 1e-3, result
