import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import containment_violations, points_outside_boxes, random_aligner, random_boxes
from samdetr import autodiff as ad
from samdetr.aligner import (
    AlignerConfig,
    SemanticsAligner,
    aligner_forward,
    box_to_image_points,
    make_position_embeddings,
    predict_salient_points,
    resample_queries,
    reweight,
)
from samdetr.autodiff import ContractError
from samdetr.geometry import bilinear_point_sample, clip_boxes_xyxy, roi_align
from samdetr.nn import sinusoidal_embed_2d


def zero_point_head(aligner):
    for p in aligner.point_mlp.parameters():
        p.assign(np.zeros(p.shape))


def test_config_validation():
    with pytest.raises(ValueError):
        AlignerConfig(strategy="mean")
    with pytest.raises(ValueError):
        AlignerConfig(search_range="anywhere")
    with pytest.raises(ContractError):
        SemanticsAligner(12, AlignerConfig(n_heads=8))
    assert AlignerConfig("sp1", 8).n_points == 1
    assert AlignerConfig("spm", 8).n_points == 8


def test_zero_point_head_gives_box_centers():
    rng = np.random.default_rng(0)
    aligner = random_aligner(rng, d=16, m=4)
    zero_point_head(aligner)
    grid = ad.tensor(rng.normal(size=(3, 7, 7, 16)))
    pts = predict_salient_points(grid, aligner).data
    assert pts.shape == (3, 4, 2)
    np.testing.assert_array_equal(pts, 0.5)


def test_points_strictly_inside_unit_square():
    rng = np.random.default_rng(1)
    aligner = random_aligner(rng, d=16, m=4)
    pts = predict_salient_points(ad.tensor(rng.normal(size=(5, 7, 7, 16))), aligner).data
    assert np.all((pts > 0) & (pts < 1))


@pytest.mark.parametrize("strategy", ["avg", "max", "sp1", "spm"])
def test_constant_grid_gives_constant_queries(strategy):
    cfg = AlignerConfig(strategy, 4)
    c = -0.75
    full = ad.tensor(np.full((3, 7, 7, 16), c))
    reduced = ad.tensor(np.full((3, 7, 7, 4), c))
    pts = ad.tensor(np.random.default_rng(2).uniform(size=(3, cfg.n_points, 2)))
    grid = full if strategy in ("avg", "max") else reduced
    q = resample_queries(grid, pts, cfg).data
    assert q.shape == (3, 16)
    np.testing.assert_array_equal(q, c)


def test_spm_slices_are_point_samples_in_head_order():
    rng = np.random.default_rng(3)
    grid = ad.tensor(rng.normal(size=(2, 7, 7, 4)))
    pts = ad.tensor(rng.uniform(size=(2, 4, 2)))
    q = resample_queries(grid, pts, AlignerConfig("spm", 4)).data
    for h in range(4):
        single = bilinear_point_sample(grid, ad.tensor(pts.data[:, h : h + 1])).data[:, 0]
        np.testing.assert_array_equal(q[:, 4 * h : 4 * h + 4], single)


def test_sp1_repeats_single_point():
    rng = np.random.default_rng(4)
    grid = ad.tensor(rng.normal(size=(2, 7, 7, 4)))
    q = resample_queries(grid, ad.tensor(rng.uniform(size=(2, 1, 2))), AlignerConfig("sp1", 4)).data
    for h in range(1, 4):
        np.testing.assert_array_equal(q[:, 4 * h : 4 * h + 4], q[:, :4])


def test_max_picks_spiked_cell():
    grid = np.zeros((1, 7, 7, 3))
    grid[0, 2, 5] = [4.0, 1.0, 2.0]
    q = resample_queries(ad.tensor(grid), None, AlignerConfig("max", 1)).data
    np.testing.assert_array_equal(q, [[4.0, 1.0, 2.0]])


def test_avg_is_grid_mean():
    grid = np.random.default_rng(5).normal(size=(2, 7, 7, 3))
    q = resample_queries(ad.tensor(grid), None, AlignerConfig("avg", 1)).data
    np.testing.assert_allclose(q, grid.mean(axis=(1, 2)), atol=1e-15)


def test_point_strategy_needs_matching_point_count():
    grid = ad.tensor(np.zeros((2, 7, 7, 4)))
    with pytest.raises(ContractError):
        resample_queries(grid, ad.tensor(np.full((2, 3, 2), 0.5)), AlignerConfig("spm", 4))


# -- position embeddings --------------------------------------------------------------


def test_center_of_full_box_embeds_image_center():
    xyxy = clip_boxes_xyxy(np.array([[0.5, 0.5, 1.0, 1.0]]))
    img = box_to_image_points(xyxy, ad.tensor(np.full((1, 4, 2), 0.5)))
    np.testing.assert_array_equal(img.data, 0.5)
    emb = make_position_embeddings(img, 16).data
    expected = sinusoidal_embed_2d(np.array([0.5, 0.5]), 4).data
    np.testing.assert_array_equal(emb, np.tile(expected, (1, 4)))


def test_distinct_points_give_distinct_slices():
    xyxy = np.array([[0.1, 0.2, 0.6, 0.9]])
    img = box_to_image_points(xyxy, ad.tensor([[[0.2, 0.3], [0.7, 0.6]]]))
    emb = make_position_embeddings(img, 16).data
    assert np.linalg.norm(emb[0, :8] - emb[0, 8:]) > 1e-6


def test_origin_points_give_sin_zero_cos_one():
    xyxy = np.array([[0.0, 0.0, 0.4, 0.7]])
    img = box_to_image_points(xyxy, ad.tensor(np.zeros((1, 4, 2))))
    emb = make_position_embeddings(img, 32).data
    np.testing.assert_array_equal(emb[0, 0::2], 0.0)
    np.testing.assert_array_equal(emb[0, 1::2], 1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_image_points_stay_in_clipped_box(seed):
    rng = np.random.default_rng(seed)
    xyxy = clip_boxes_xyxy(random_boxes(rng, 6))
    u = rng.uniform(size=(6, 3, 2))
    u[0, 0] = [1.0, 1.0]
    u[1, 0] = [0.0, 1.0]
    img = box_to_image_points(xyxy, ad.tensor(u)).data
    assert np.all(img >= xyxy[:, None, :2]) and np.all(img <= xyxy[:, None, 2:])


# -- reweighting --------------------------------------------------------------------------


def test_zero_reweight_halves_inputs():
    rng = np.random.default_rng(6)
    q, pos, prev = (ad.tensor(rng.normal(size=(3, 8))) for _ in range(3))
    zero = ad.tensor(np.zeros((8, 8)))
    a, b = reweight(q, pos, prev, zero, zero)
    np.testing.assert_array_equal(a.data, q.data / 2)
    np.testing.assert_array_equal(b.data, pos.data / 2)


def test_saturated_reweight_passes_inputs():
    rng = np.random.default_rng(7)
    q, pos = ad.tensor(rng.normal(size=(3, 8))), ad.tensor(rng.normal(size=(3, 8)))
    prev = ad.tensor(np.full((3, 8), 5.0))
    ones = ad.tensor(np.ones((8, 8)))  # projections equal 5 * 8 = 40
    a, b = reweight(q, pos, prev, ones, ones)
    np.testing.assert_allclose(a.data, q.data, atol=1e-12, rtol=0)
    np.testing.assert_allclose(b.data, pos.data, atol=1e-12, rtol=0)


def test_reweight_gradients():
    rng = np.random.default_rng(8)
    q, pos, prev, w1, w2 = (ad.tensor(rng.normal(size=s), requires_grad=True)
                            for s in ((2, 4), (2, 4), (2, 4), (4, 4), (4, 4)))
    k = rng.normal(size=(2, 4))

    def fn():
        a, b = reweight(q, pos, prev, w1, w2)
        return ad.reduce_sum(ad.mul(ad.add(a, ad.scale(b, 0.7)), k))

    assert ad.gradcheck(fn, [q, pos, prev, w1, w2]) < 1e-6


# -- full aligner -----------------------------------------------------------------------


@pytest.mark.parametrize("strategy", ["avg", "max", "sp1", "spm"])
def test_constant_features_give_identical_queries(strategy):
    rng = np.random.default_rng(9)
    aligner = random_aligner(rng, d=16, m=4, strategy=strategy)
    feats = ad.tensor(np.full((8, 8, 16), 0.3))
    boxes = random_boxes(rng, 5)
    out = aligner_forward(feats, boxes, ad.tensor(rng.normal(size=(5, 16))), aligner)
    np.testing.assert_array_equal(out.queries.data, np.tile(out.queries.data[:1], (5, 1)))


@pytest.mark.parametrize("strategy", ["avg", "max", "sp1", "spm"])
@pytest.mark.parametrize("search_range", ["box", "image"])
def test_queries_are_contained_in_sampled_features(strategy, search_range):
    rng = np.random.default_rng(10)
    for _ in range(20):
        aligner = random_aligner(rng, d=16, m=4, strategy=strategy, search_range=search_range)
        feats = ad.tensor(rng.normal(size=(8, 8, 16)) * rng.uniform(0.1, 10))
        boxes = random_boxes(rng, 6)
        out = aligner_forward(feats, boxes, ad.tensor(rng.normal(size=(6, 16))), aligner)
        assert containment_violations(aligner, feats, boxes, out.queries.data) == 0


def test_points_inside_boxes_under_box_range():
    rng = np.random.default_rng(11)
    for scale in (0.0, 1.0, 30.0):
        aligner = random_aligner(rng, d=16, m=4, scale=scale)
        boxes = random_boxes(rng, 8)
        out = aligner(ad.tensor(rng.normal(size=(8, 8, 16))), boxes, ad.tensor(rng.normal(size=(8, 16))))
        assert points_outside_boxes(out.points_image.data, boxes) == 0


def test_head_alignment():
    rng = np.random.default_rng(12)
    aligner = random_aligner(rng, d=16, m=4, strategy="spm", reweight=False)
    feats = ad.tensor(rng.normal(size=(8, 8, 16)))
    boxes = random_boxes(rng, 3, max_size=0.6)
    out = aligner(feats, boxes, ad.tensor(np.zeros((3, 16))))
    reduced = roi_align(aligner.reduce(feats), boxes).grid
    for h in range(4):
        p = out.points.data[:, h : h + 1]
        feat_h = bilinear_point_sample(reduced, ad.tensor(p)).data[:, 0]
        np.testing.assert_array_equal(out.queries.data[:, 4 * h : 4 * h + 4], feat_h)
        pos_h = sinusoidal_embed_2d(out.points_image.data[:, h], 4).data
        np.testing.assert_array_equal(out.pos.data[:, 4 * h : 4 * h + 4], pos_h)


def test_aligner_is_deterministic():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(13)
        aligner = random_aligner(rng, d=16, m=4, reweight=True)
        out = aligner(ad.tensor(rng.normal(size=(8, 8, 16))), random_boxes(rng, 4), ad.tensor(rng.normal(size=(4, 16))))
        outs.append((out.queries.data, out.pos.data, out.points.data))
    for a, b in zip(*outs):
        assert np.array_equal(a, b)


def test_image_search_range_allows_points_outside_box():
    rng = np.random.default_rng(14)
    aligner = random_aligner(rng, d=16, m=4, search_range="image")
    last = aligner.point_mlp.layers[-1]
    last.weight.assign(np.zeros(last.weight.shape))
    last.bias.assign(np.full(last.bias.shape, 3.0))  # every point near (0.95, 0.95)
    boxes = np.array([[0.2, 0.2, 0.2, 0.2]])
    out = aligner(ad.tensor(rng.normal(size=(8, 8, 16))), boxes, ad.tensor(np.zeros((1, 16))))
    assert points_outside_boxes(out.points_image.data, boxes) == 4
    np.testing.assert_allclose(out.points_image.data, 1 / (1 + np.exp(-3.0)), atol=1e-15)


def test_aligner_gradient_wrt_features():
    rng = np.random.default_rng(15)
    aligner = random_aligner(rng, d=8, m=2, reweight=True)
    feats = ad.tensor(rng.normal(size=(4, 4, 8)), requires_grad=True)
    boxes = np.array([[0.4, 0.55, 0.5, 0.6], [0.6, 0.4, 0.3, 0.7]])
    prev = ad.tensor(rng.normal(size=(2, 8)), requires_grad=True)
    k1, k2 = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))

    def fn():
        out = aligner(feats, boxes, prev)
        return ad.add(ad.reduce_sum(ad.mul(out.queries, k1)), ad.reduce_sum(ad.mul(out.pos, k2)))

    assert ad.gradcheck(fn, [feats, prev]) < 1e-4
