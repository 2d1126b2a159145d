import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xprot.attribution import SummedMap
from xprot.embedding import (EmbeddingConfig, EmbeddingError, emit_scatter, flatten, kmeans,
                             min_points, pca, rand_index, scatter_csv, scatter_svg,
                             synthetic_summed_maps, tsne, unflatten)

FAST = EmbeddingConfig(perplexity=10, iterations=400, exaggeration_iterations=100,
                       momentum_switch=100, seed=3)


def test_flatten_cases():
    assert flatten([SummedMap(np.array([[1.0, 2.0], [3.0, 4.0]]), "p", 0)]).tolist() == [[1, 2, 3, 4]]
    assert flatten([]).shape == (0, 0)
    with pytest.raises(EmbeddingError):
        flatten([np.zeros((2, 2)), np.zeros((2, 3))])


@given(arrays(np.float64, (4, 3, 5), elements=st.floats(-10, 10)))
def test_unflatten_round_trip(maps):
    assert np.array_equal(unflatten(flatten(list(maps)), 3, 5), maps)


def test_pca_line_is_rank_one(rng):
    t = rng.normal(size=50)
    x = np.outer(t, [1.0, -2.0, 0.5]) + [3, 4, 5]
    _, evals, _ = pca(x, 2)
    assert evals[0] / evals.sum() >= 1 - 1e-10


def test_pca_isotropic_cloud(rng):
    _, evals, _ = pca(rng.normal(size=(4000, 3)), 3)
    assert evals[0] / evals[-1] < 1.2


def test_pca_reconstruction_error_is_discarded_variance(rng):
    x = rng.normal(size=(40, 6)) @ rng.normal(size=(6, 6))
    scores, evals, comps = pca(x, 3)
    centered = x - x.mean(axis=0)
    err = np.sum((centered - scores @ comps.T) ** 2) / (len(x) - 1)
    assert abs(err - evals[3:].sum()) <= 1e-9


def test_pca_scores_properties(rng):
    x = rng.normal(size=(30, 8)) @ rng.normal(size=(8, 8))
    scores, evals, comps = pca(x, 5)
    assert np.all(np.abs(scores.mean(axis=0)) <= 1e-10)
    cov = np.cov(scores.T)
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() <= 1e-8 * np.abs(cov).max()
    assert np.all(np.diff(evals) <= 0)
    lead = np.argmax(np.abs(comps), axis=0)
    assert np.all(comps[lead, np.arange(5)] > 0)


def test_pca_rank_bound():
    with pytest.raises(EmbeddingError, match="rank"):
        pca(np.random.default_rng(0).normal(size=(5, 10)), 5)
    with pytest.raises(EmbeddingError):
        pca(np.zeros((1, 3)), 1)


def _blobs(n_per=30, seed=0):
    gen = np.random.default_rng(seed)
    x = np.vstack([gen.normal(0, 1, (n_per, 5)), gen.normal(20, 1, (n_per, 5))])
    return x, np.repeat([0, 1], n_per)


def test_tsne_separates_blobs():
    x, labels = _blobs()
    y = tsne(x, FAST)
    assert rand_index(kmeans(y, 2, seed=0), labels) >= 0.95
    assert np.all(np.abs(y.mean(axis=0)) <= 1e-6 * np.abs(y).max())


def test_tsne_deterministic():
    x, _ = _blobs()
    assert np.array_equal(tsne(x, FAST), tsne(x, FAST))


def test_tsne_duplicates_land_together():
    x, _ = _blobs()
    x[1] = x[0]
    y = tsne(x, FAST)
    d = np.linalg.norm(y - y[0], axis=1)
    assert np.argsort(d)[1] == 1


@pytest.mark.xfail(strict=True, reason="merging the duplicates raises the KL objective; its optimum "
                                        "keeps them at neighbour spacing")
def test_tsne_duplicates_within_thousandth_of_scale():
    x, _ = _blobs()
    x[1] = x[0]
    y = tsne(x, FAST)
    assert np.linalg.norm(y[0] - y[1]) <= 1e-3 * np.ptp(y)


@pytest.mark.xfail(strict=True, reason="momentum with adaptive gains overshoots for a few iterations")
def test_tsne_late_kl_strictly_monotone():
    x, _ = _blobs(seed=4)
    _, hist = tsne(x, EmbeddingConfig(perplexity=10, seed=1), return_history=True)
    assert np.diff(hist[-500:]).max() <= 1e-6


def test_tsne_late_kl_decreases():
    x, _ = _blobs(seed=4)
    _, hist = tsne(x, EmbeddingConfig(perplexity=10, seed=1), return_history=True)
    late = hist[-500:]
    steps = np.diff(late)
    # momentum with adaptive gains overshoots briefly, but the drift is downward
    assert late[-1] < late[0]
    assert late[-1] <= late.min() + 1e-6
    assert np.abs(steps).max() < 0.25 * (late[0] - late[-1])


def test_tsne_preconditions():
    with pytest.raises(EmbeddingError, match="91"):
        tsne(np.random.default_rng(0).normal(size=(90, 3)), EmbeddingConfig())
    with pytest.raises(EmbeddingError, match="identical"):
        tsne(np.ones((40, 3)), FAST)
    assert min_points(30) == 91 and min_points(29) == 88


def test_kmeans_and_rand_index():
    x, labels = _blobs()
    assert rand_index(kmeans(x, 2, seed=5), labels) == 1.0
    assert rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(2 / 6)


def test_scatter_outputs(tmp_path):
    pts = np.array([[0.0, 1.0], [2.0, -1.0], [1.0, 0.5]])
    csv_text = scatter_csv(pts, ["a", "b", "a"], ["p1", "p2", "p3"])
    assert len(csv_text.strip().splitlines()) == 4
    assert csv_text.splitlines()[0] == "protein_id,class,x,y"
    ET.fromstring(scatter_svg(pts[:1], ["a"]))
    root = ET.fromstring(scatter_svg(pts, ["a", "b", "a"]))
    circles = [e for e in root.iter() if e.tag.endswith("circle")]
    assert len(circles) == 3 and circles[0].get("fill") == circles[2].get("fill") != circles[1].get("fill")
    c, s = emit_scatter(pts, ["a", "b", "a"], ["p1", "p2", "p3"], tmp_path / "out")
    assert c.read_text() == csv_text
    with pytest.raises(EmbeddingError):
        emit_scatter(pts, ["a"], ["p1"], tmp_path)


def test_synthetic_maps_structure():
    maps, labels = synthetic_summed_maps(90, 3, 30, 16, seed=0)
    assert len(maps) == 90 and maps[0].values.shape == (30, 16)
    assert sorted(set(labels)) == ["class0", "class1", "class2"]
    assert [labels.count(c) for c in ("class0", "class1", "class2")] == [30, 30, 30]
    again, _ = synthetic_summed_maps(90, 3, 30, 16, seed=0)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(maps, again))
