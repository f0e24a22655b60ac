"""Pair-scoring tests: kernel grids, contrastive correlation against a
brute-force oracle, and batched scoring against the one-pair path."""

import numpy as np
import pytest

from ccreid import autodiff as ad
from ccreid import contrast as ct
from ccreid.autodiff import ShapeError, tensor
from ccreid.backbone import IR, RGB, CommonFeature


@pytest.fixture(autouse=True)
def _float64():
    with ad.precision(np.float64):
        yield


def _head(n_in, seed=0):
    rng = np.random.default_rng(seed)
    return ct.DifferenceHead(weight=tensor(rng.normal(size=(1, n_in)) * 0.3),
                             bias=tensor(rng.normal(size=(1,)) * 0.3))


# ---------------------------------------------------------------------------
# origin grids


def brute_origins(h_f, w_f, cfg):
    out = []
    for i in range(h_f - cfg.h_k + 1):
        for j in range(w_f - cfg.w_k + 1):
            if i % cfg.stride_v == 0 and j % cfg.stride_h == 0:
                out.append((i, j))
    return out


@pytest.mark.parametrize("h_f,w_f,h_k,w_k,sv,sh", [
    (8, 4, 3, 3, 1, 1),
    (8, 4, 2, 2, 2, 2),
    (7, 5, 3, 2, 2, 3),
    (4, 4, 4, 4, 1, 1),
])
def test_origin_grid_matches_double_loop(h_f, w_f, h_k, w_k, sv, sh):
    cfg = ct.SamplingConfig(h_k=h_k, w_k=w_k, stride_v=sv, stride_h=sh)
    got = ct.kernel_origins(h_f, w_f, cfg)
    assert got == brute_origins(h_f, w_f, cfg)
    assert len(got) == ct.kernel_count_formula(h_f, w_f, cfg)


def test_default_desk_grid_has_twelve_kernels():
    cfg = ct.SamplingConfig()
    assert ct.kernel_count_formula(8, 4, cfg) == 12
    assert ct.contrast_extent((64, 8, 4), cfg) == (12, 6, 2)
    assert ct.head_input_size((64, 8, 4), cfg) == 144


def test_edge_snap_appends_flush_origins():
    plain = ct.SamplingConfig(h_k=3, w_k=3, stride_v=2, stride_h=2)
    snap = ct.SamplingConfig(h_k=3, w_k=3, stride_v=2, stride_h=2, edge_snap=True)
    # extent 8: starts 0,2,4 and last flush start is 5
    rows_plain = {i for i, _ in ct.kernel_origins(8, 8, plain)}
    rows_snap = {i for i, _ in ct.kernel_origins(8, 8, snap)}
    assert rows_plain == {0, 2, 4}
    assert rows_snap == {0, 2, 4, 5}
    # when the grid already lands flush the two enumerations agree
    assert ct.kernel_origins(7, 7, plain) == ct.kernel_origins(7, 7, snap)


def test_sampling_validation():
    with pytest.raises(ValueError):
        ct.SamplingConfig(h_k=0).validate(8, 4)
    with pytest.raises(ValueError):
        ct.SamplingConfig(stride_v=0).validate(8, 4)
    with pytest.raises(ShapeError):
        ct.SamplingConfig(h_k=9).validate(8, 4)


# ---------------------------------------------------------------------------
# kernel extraction


def test_sample_kernels_are_map_crops():
    rng = np.random.default_rng(1)
    fmap = rng.normal(size=(5, 6, 4))
    cfg = ct.SamplingConfig(h_k=2, w_k=3, stride_v=2, stride_h=1)
    ks = ct.sample_kernels(CommonFeature(tensor(fmap), RGB), cfg)
    assert len(ks) == len(ks.origins)
    for k, (i, j) in enumerate(ks.origins):
        assert np.array_equal(ks.kernels.data[k], fmap[:, i:i + 2, j:j + 3])
    assert ks.kernel(2).shape == (1, 5, 2, 3)


def test_extract_batch_matches_per_image_crops():
    rng = np.random.default_rng(2)
    maps = rng.normal(size=(3, 5, 6, 4))
    cfg = ct.SamplingConfig(h_k=2, w_k=3, stride_v=2, stride_h=1)
    origins = ct.kernel_origins(6, 4, cfg)
    got = ct.extract_kernels_batch(tensor(maps), origins, 2, 3)
    assert got.shape == (3, len(origins), 5, 2, 3)
    for b in range(3):
        for k, (i, j) in enumerate(origins):
            assert np.array_equal(got.data[b, k], maps[b, :, i:i + 2, j:j + 3])
    with pytest.raises(ShapeError):
        ct.extract_kernels_batch(tensor(maps[0]), origins, 2, 3)


def test_contrastive_kernels_are_absolute_differences():
    rng = np.random.default_rng(3)
    cfg = ct.SamplingConfig(h_k=2, w_k=2)
    fr = CommonFeature(tensor(rng.normal(size=(3, 4, 4))), RGB)
    fi = CommonFeature(tensor(rng.normal(size=(3, 4, 4))), IR)
    kr, ki = ct.sample_kernels(fr, cfg), ct.sample_kernels(fi, cfg)
    kc = ct.contrastive_kernels(kr, ki)
    assert np.allclose(kc.kernels.data, np.abs(kr.kernels.data - ki.kernels.data))
    short = ct.sample_kernels(
        CommonFeature(tensor(rng.normal(size=(3, 3, 3))), IR), cfg)
    with pytest.raises(ShapeError):
        ct.contrastive_kernels(kr, short)


# ---------------------------------------------------------------------------
# correlation


def correlate_oracle(kernels, maps):
    """Direct loops: valid extent, stride 1, summed over channels."""
    m, n, c, kh, kw = kernels.shape
    _, _, h, w = maps.shape
    oh, ow = h - kh + 1, w - kw + 1
    out = np.zeros((m, n, oh, ow))
    for p in range(m):
        for k in range(n):
            for y in range(oh):
                for x in range(ow):
                    out[p, k, y, x] = (kernels[p, k] *
                                       maps[p, :, y:y + kh, x:x + kw]).sum()
    return out


def test_correlate_pairs_matches_bruteforce():
    rng = np.random.default_rng(4)
    kernels = rng.normal(size=(2, 3, 4, 2, 3))
    maps = rng.normal(size=(2, 4, 6, 5))
    got = ct.correlate_pairs(tensor(kernels), tensor(maps))
    assert got.shape == (2, 3, 5, 3)
    assert np.allclose(got.data, correlate_oracle(kernels, maps), atol=1e-12)


def test_correlate_pairs_shape_errors():
    k = tensor(np.zeros((2, 3, 4, 2, 2)))
    with pytest.raises(ShapeError):
        ct.correlate_pairs(k, tensor(np.zeros((3, 4, 6, 5))))
    with pytest.raises(ShapeError):
        ct.correlate_pairs(k, tensor(np.zeros((2, 5, 6, 5))))
    with pytest.raises(ShapeError):
        ct.correlate_pairs(k, tensor(np.zeros((2, 4, 1, 5))))


def test_contrastive_correlate_single_map():
    rng = np.random.default_rng(5)
    cfg = ct.SamplingConfig(h_k=2, w_k=2)
    f = CommonFeature(tensor(rng.normal(size=(3, 5, 4))), RGB)
    ks = ct.sample_kernels(f, cfg)
    feat = ct.contrastive_correlate(ks, f)
    n, oh, ow = ct.contrast_extent((3, 5, 4), cfg)
    assert feat.map.shape == (n, oh, ow)
    oracle = correlate_oracle(ks.kernels.data[None], f.map.data[None])[0]
    assert np.allclose(feat.map.data, oracle, atol=1e-12)


# ---------------------------------------------------------------------------
# scoring


def test_difference_scores_sigmoid_head():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(2, 3, 3))
    b = rng.normal(size=(2, 3, 3))
    head = _head(18, seed=7)
    ps = ct.difference_scores(ct.ContrastiveFeature(tensor(a)),
                              ct.ContrastiveFeature(tensor(b)), head)
    w, bias = head.weight.data[0], head.bias.data[0]

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    d_r = sig(w @ (ct.PAIR_FEATURE_GAIN * a.reshape(-1)) + bias)
    d_i = sig(w @ (ct.PAIR_FEATURE_GAIN * b.reshape(-1)) + bias)
    assert ps.d_r_given_i.item() == pytest.approx(d_r)
    assert ps.d_i_given_r.item() == pytest.approx(d_i)
    assert ps.d_pair.item() == pytest.approx(0.5 * (d_r + d_i))
    with pytest.raises(ShapeError):
        ct.difference_scores(ct.ContrastiveFeature(tensor(a)),
                             ct.ContrastiveFeature(tensor(b)), _head(7))


def test_scores_live_in_unit_interval():
    rng = np.random.default_rng(8)
    cfg = ct.SamplingConfig(h_k=2, w_k=2)
    n_in = ct.head_input_size((3, 5, 4), cfg)
    head = _head(n_in, seed=9)
    f_r = CommonFeature(tensor(rng.uniform(size=(3, 5, 4))), RGB)
    f_i = CommonFeature(tensor(rng.uniform(size=(3, 5, 4))), IR)
    ps = ct.score_pair(f_r, f_i, cfg, head)
    for t in (ps.d_r_given_i, ps.d_i_given_r, ps.d_pair):
        assert 0.0 < t.item() < 1.0


def test_identical_maps_score_like_fresh_bias():
    # identical inputs zero every contrastive kernel, so both directions
    # reduce to sigmoid(bias)
    rng = np.random.default_rng(10)
    cfg = ct.SamplingConfig(h_k=2, w_k=2)
    n_in = ct.head_input_size((3, 5, 4), cfg)
    head = _head(n_in, seed=11)
    f = CommonFeature(tensor(rng.uniform(size=(3, 5, 4))), RGB)
    ps = ct.score_pair(f, CommonFeature(f.map, IR), cfg, head)
    expected = 1.0 / (1.0 + np.exp(-head.bias.data[0]))
    assert ps.d_pair.item() == pytest.approx(expected)


def test_score_pair_rejects_mismatched_maps():
    cfg = ct.SamplingConfig(h_k=2, w_k=2)
    f_r = CommonFeature(tensor(np.zeros((3, 5, 4))), RGB)
    f_i = CommonFeature(tensor(np.zeros((3, 4, 4))), IR)
    with pytest.raises(ShapeError):
        ct.score_pair(f_r, f_i, cfg, _head(4))


def test_batched_scores_match_one_pair_path():
    rng = np.random.default_rng(12)
    cfg = ct.SamplingConfig(h_k=2, w_k=2)
    n_in = ct.head_input_size((3, 5, 4), cfg)
    head = _head(n_in, seed=13)
    maps_r = rng.uniform(size=(3, 3, 5, 4))
    maps_i = rng.uniform(size=(4, 3, 5, 4))
    rgb_idx = np.array([0, 1, 2, 0, 1])
    ir_idx = np.array([0, 1, 2, 3, 0])
    batch = ct.score_pairs_batch(tensor(maps_r), tensor(maps_i),
                                 rgb_idx, ir_idx, cfg, head)
    assert batch.shape == (5,)
    for m, (a, b) in enumerate(zip(rgb_idx, ir_idx)):
        one = ct.score_pair(CommonFeature(tensor(maps_r[a]), RGB),
                            CommonFeature(tensor(maps_i[b]), IR), cfg, head)
        assert batch.data[m] == pytest.approx(one.d_pair.item(), abs=1e-12)


def test_batched_scores_backward_matches_finite_differences():
    rng = np.random.default_rng(14)
    cfg = ct.SamplingConfig(h_k=2, w_k=2, stride_v=2, stride_h=2)
    n_in = ct.head_input_size((2, 4, 4), cfg)
    head = _head(n_in, seed=15)
    maps_i = tensor(rng.uniform(0.1, 1.0, size=(2, 2, 4, 4)))
    x = tensor(rng.uniform(0.1, 1.0, size=(2, 2, 4, 4)), requires_grad=True)
    idx = np.array([0, 1, 1])

    def loss(t):
        s = ct.score_pairs_batch(t, maps_i, idx, np.array([1, 0, 1]), cfg, head)
        return ad.tsum(ad.mul(s, s))

    assert ad.finite_diff_check(loss, x, eps=1e-6) < 1e-6
