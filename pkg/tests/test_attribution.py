import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_model, random_tokens
from xprot.attribution import (AttributionError, AttributionMap, PathSpec, SummedMap,
                               assemble_summed_map, baseline_embedding, completeness_gap,
                               embedding_path, head_cut_attributions, ig_all_layers,
                               ig_embedding, ig_head_level, integrated_gradients, reduce_heads,
                               sum_over_sequence, token_flags, trapezoid_attribution)
from xprot.model import PAD


def test_path_endpoints_and_midpoint(rng):
    x, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    p1 = embedding_path(x, b, 1)
    assert np.array_equal(p1[0], b) and np.array_equal(p1[1], x)
    p8 = embedding_path(x, b, 8)
    assert np.allclose(p8[4], (x + b) / 2, atol=1e-15)
    assert np.all(embedding_path(x, x, 5) == x)


def test_path_rejects_bad_input():
    with pytest.raises(ValueError):
        embedding_path(np.zeros(3), np.zeros(4), 4)
    with pytest.raises(ValueError):
        PathSpec(steps=0)
    with pytest.raises(ValueError):
        PathSpec(baseline="noise")


def test_linear_model_attribution_is_exact(rng):
    w = rng.normal(size=(5, 6))
    x = rng.normal(size=(5, 6))
    grad_fn = lambda pts: ((pts * w).sum(axis=(1, 2)), np.broadcast_to(w, pts.shape))
    attr, fx, fb = integrated_gradients(grad_fn, x, np.zeros_like(x), 7, chunk=3)
    assert np.allclose(attr, w * x, rtol=0, atol=1e-14)
    assert abs(attr.sum() - (fx - fb)) <= 1e-12


def test_baseline_equal_to_sample_gives_zero(small_model, rng):
    x = small_model.embed(random_tokens(rng)).numpy()
    attr, _, _ = integrated_gradients(lambda p: small_model.embedding_gradient(p, 0), x, x, 16)
    assert np.all(attr == 0)


def test_completeness_gap_arithmetic():
    assert completeness_gap(2.0, 3.0, 1.0) == 0.0
    assert completeness_gap(2.02, 2.0, 0.0) == pytest.approx(0.01, abs=1e-15)
    assert completeness_gap(1e-3, 1.0, 1.0) == 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(1, 70))
def test_chunking_does_not_change_result(chunk, steps):
    gen = np.random.default_rng(steps)
    x = gen.normal(size=(4, 3))

    def grad_fn(pts):
        return np.sin(pts).sum(axis=(1, 2)), np.cos(pts)

    a, fa, ba = integrated_gradients(grad_fn, x, np.zeros_like(x), steps, chunk=chunk)
    b, fb, bb = integrated_gradients(grad_fn, x, np.zeros_like(x), steps, chunk=1000)
    assert np.allclose(a, b, rtol=0, atol=1e-13) and fa == fb and ba == bb
    assert abs(a.sum() - (fa - ba)) < 0.5 / steps ** 2 * x.size + 1e-12


def test_nonfinite_gradient_names_path_index():
    def grad_fn(pts):
        g = np.ones_like(pts)
        g[pts[:, 0, 0] > 0.5] = np.nan
        return pts.sum(axis=(1, 2)), g

    with pytest.raises(AttributionError, match="path index 3"):
        integrated_gradients(grad_fn, np.ones((1, 1)), np.zeros((1, 1)), 4, chunk=2)


def test_pad_baseline_is_pad_embedding(small_model):
    base = baseline_embedding(small_model, [2, 5, 6, 3], "pad")
    assert np.array_equal(base, np.tile(small_model.params["embed.token"][PAD].numpy(), (4, 1)))
    assert np.all(baseline_embedding(small_model, [2, 5, 3], "zero") == 0)


def _smooth_model(seed):
    # every classifier ReLU active; with a single residue the max-pool never switches
    model = random_model(n_layers=2, n_heads=2, d_model=16, d_ff=32, seed=seed)
    model.params["head.b1"][:] = 50.0
    return model


def test_embedding_completeness_and_refinement(rng):
    for seed in range(3):
        model = _smooth_model(seed)
        toks = random_tokens(rng, 1, 1)
        gaps = [ig_embedding(model, toks, 1, PathSpec("zero", m)).completeness_gap
                for m in (16, 32, 64, 128, 256)]
        assert gaps[-1] <= 1e-3
        for coarse, fine in zip(gaps, gaps[1:]):
            assert fine < coarse
            # trapezoid error is second order on a smooth path
            assert 3.0 < coarse / fine < 5.0


def test_kinked_model_still_converges(rng):
    model = random_model(n_layers=2, n_heads=2, d_model=16, d_ff=32, seed=11)
    toks = random_tokens(rng, 4, 12)
    coarse = ig_embedding(model, toks, 1, PathSpec("zero", 16)).completeness_gap
    fine = ig_embedding(model, toks, 1, PathSpec("zero", 1024)).completeness_gap
    assert fine < coarse and fine <= 1e-2


def test_embedding_map_fields(small_model, rng):
    toks = random_tokens(rng, 3, 3)
    m = ig_embedding(small_model, toks, 0, PathSpec("pad", 8), "p1")
    assert m.values.shape == (5, small_model.config.d_model)
    assert m.token_flags == ["cls", "residue", "residue", "residue", "sep"]
    assert m.residue_rows().shape == (3,)
    assert np.allclose(m.relevance, m.values.sum(axis=1))
    back = AttributionMap.from_json(m.to_json())
    assert np.array_equal(back.values, m.values) and back.baseline == "pad"


def test_head_reduction_is_reassociation(rng):
    model = random_model(n_layers=2, n_heads=4, d_model=16, d_ff=16, seed=2)
    raw = head_cut_attributions(model, random_tokens(rng), 0, [0, 1], PathSpec("zero", 16))
    for c_attr, *_ in raw.values():
        reduced = reduce_heads(c_attr, 4)
        assert np.allclose(reduced.sum(axis=1), c_attr.sum(axis=1), rtol=0, atol=1e-12)


@given(arrays(np.float64, (3, 12), elements=st.floats(-1e3, 1e3)))
def test_reduce_heads_blocks(a):
    out = reduce_heads(a, 4)
    for h in range(4):
        assert np.array_equal(out[:, h], a[:, 3 * h:3 * h + 3].sum(axis=1))


def test_reduce_heads_rejects_uneven():
    with pytest.raises(ValueError):
        reduce_heads(np.zeros((2, 10)), 4)


def test_head_level_completeness(rng):
    model = _smooth_model(5)
    toks = random_tokens(rng, 1, 1)
    for layer in (0, 1):
        coarse = ig_head_level(model, toks, 1, layer, PathSpec("zero", 64))
        fine = ig_head_level(model, toks, 1, layer, PathSpec("zero", 512))
        assert fine.completeness_gap <= 1e-2
        assert fine.completeness_gap < coarse.completeness_gap
        assert fine.values.shape == (len(toks), 2) and fine.skip.shape == (len(toks), 16)
        total = fine.values.sum() + fine.skip.sum()
        assert completeness_gap(total, fine.logit_sample, fine.logit_baseline) == pytest.approx(
            fine.completeness_gap, rel=1e-6)


def test_zeroed_projection_sends_everything_through_skip(rng):
    model = random_model(n_layers=2, seed=8)
    model.params["layer1.w_o"].zero_()
    m = ig_head_level(model, random_tokens(rng), 0, 1, PathSpec("zero", 32))
    assert np.all(m.values == 0)
    assert np.abs(m.skip).sum() > 0


def test_all_layers_matches_single_layer(rng):
    model = random_model(n_layers=3, seed=9)
    toks = random_tokens(rng)
    spec = PathSpec("pad", 20)
    all_maps = ig_all_layers(model, toks, 1, spec, "x")
    for layer in range(3):
        single = ig_head_level(model, toks, 1, layer, spec, "x")
        assert np.allclose(all_maps[layer].values, single.values, rtol=0, atol=1e-13)
    summed = assemble_summed_map(all_maps, 3)
    assert summed.values.shape == (3, 2)
    assert np.array_equal(summed.values[2], all_maps[2].values.sum(axis=0))


def test_layer_out_of_range(small_model, rng):
    with pytest.raises(IndexError):
        ig_head_level(small_model, random_tokens(rng), 0, 3)


def test_summed_map_cases(rng):
    one = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(sum_over_sequence(one), one[0])
    maps = [AttributionMap("head", np.zeros((4, 2)), "p", 0, 8, "zero", 0.0, 0.0, 0.0, layer=l)
            for l in range(3)]
    assert np.all(assemble_summed_map(maps, 3).values == 0)
    vals = [rng.normal(size=(6, 2)) for _ in range(3)]
    maps = [AttributionMap("head", v, "p", 0, 8, "zero", 0.0, 0.0, 0.0, layer=l)
            for l, v in enumerate(vals)]
    summed = assemble_summed_map(maps, 3).values
    for l in range(3):
        for h in range(2):
            ref = 0.0
            for t in range(6):
                ref += vals[l][t, h]
            assert summed[l, h] == pytest.approx(ref, abs=1e-14)
    with pytest.raises(AttributionError):
        assemble_summed_map(maps[:2], 3)
    s = SummedMap(summed, "p", 0)
    assert np.array_equal(SummedMap.from_json(s.to_json()).values, summed)


def test_trapezoid_telescopes_with_constant_gradient(rng):
    pts = np.cumsum(rng.normal(size=(10, 3)), axis=0)
    attr = trapezoid_attribution(np.ones_like(pts), pts)
    assert np.allclose(attr, pts[-1] - pts[0], atol=1e-13)


def test_token_flags():
    assert token_flags(4) == ["cls", "residue", "residue", "sep"]
