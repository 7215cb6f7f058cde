"""Depth scan, source blending, aggregation, and over-compositing."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from svnvs import rendering
from svnvs.errors import NonFiniteError


# ---------------------------------------------------------------------------
# blend weights


def test_blend_weights_known_logits():
    logits = torch.zeros(2, 1, 2, 2)
    logits[0] = math.log(3.0)
    w = rendering.blend_weights(logits)
    torch.testing.assert_close(w[0], torch.full((1, 2, 2), 0.75), atol=1e-6, rtol=0)
    torch.testing.assert_close(w[1], torch.full((1, 2, 2), 0.25), atol=1e-6, rtol=0)


def test_blend_weights_equal_logits_are_uniform():
    w = rendering.blend_weights(torch.full((4, 2, 3, 3), 5.0))
    torch.testing.assert_close(w, torch.full_like(w, 0.25), atol=1e-6, rtol=0)


def test_blend_weights_survive_huge_logits():
    logits = torch.tensor([1e4, -1e4, 0.0]).reshape(3, 1, 1, 1)
    w = rendering.blend_weights(logits)
    assert torch.isfinite(w).all()
    torch.testing.assert_close(w.sum(dim=0), torch.ones(1, 1, 1), atol=1e-6, rtol=0)
    assert w[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-6)


def test_blend_weights_rejects_bad_shape():
    with pytest.raises(ValueError):
        rendering.blend_weights(torch.zeros(2, 3, 4))


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_blend_weights_partition_of_unity(seed):
    g = torch.Generator().manual_seed(seed)
    n = int(torch.randint(2, 6, (1,), generator=g))
    logits = torch.randn(n, 2, 3, 3, generator=g) * 10 ** int(
        torch.randint(0, 4, (1,), generator=g))
    w = rendering.blend_weights(logits)
    assert (w >= 0).all()
    torch.testing.assert_close(w.sum(dim=0), torch.ones(2, 3, 3), atol=1e-5, rtol=0)
    # adding a per-cell constant across sources changes nothing
    shift = torch.randn(1, 2, 3, 3, generator=g) * 100
    torch.testing.assert_close(rendering.blend_weights(logits + shift), w,
                               atol=1e-5, rtol=0)


# ---------------------------------------------------------------------------
# depth scan


def test_scanner_outputs_distribution():
    torch.manual_seed(0)
    scan = rendering.DepthRayScanner()
    consensus = torch.randn(5, 8, 6, 6)
    prob = scan(consensus)
    assert prob.shape == (5, 6, 6)
    assert (prob >= 0).all()
    torch.testing.assert_close(prob.sum(dim=0), torch.ones(6, 6), atol=1e-5, rtol=0)


def test_scanner_zero_weights_give_uniform():
    scan = rendering.DepthRayScanner()
    with torch.no_grad():
        for p in scan.parameters():
            p.zero_()
    prob = scan(torch.randn(4, 8, 3, 3))
    torch.testing.assert_close(prob, torch.full((4, 3, 3), 0.25), atol=1e-6, rtol=0)


def test_scanner_is_pixelwise():
    """1x1 kernels mean each ray is scanned independently."""
    torch.manual_seed(0)
    scan = rendering.DepthRayScanner()
    consensus = torch.randn(4, 8, 5, 7)
    full = scan(consensus)
    column = scan(consensus[:, :, 2:3, 3:4])
    torch.testing.assert_close(column[:, 0, 0], full[:, 2, 3], atol=1e-6, rtol=0)


def test_scanner_depends_on_plane_order():
    torch.manual_seed(0)
    scan = rendering.DepthRayScanner()
    consensus = torch.randn(4, 8, 3, 3)
    prob = scan(consensus)
    rev = torch.arange(3, -1, -1)
    prob_rev = scan(consensus[rev])
    assert not torch.allclose(prob_rev[rev], prob, atol=1e-4)


def test_scanner_rejects_bad_shape():
    scan = rendering.DepthRayScanner()
    with pytest.raises(ValueError):
        scan(torch.randn(4, 8, 3))


# ---------------------------------------------------------------------------
# aggregation


def _delta_prob(d, h, w, k):
    prob = torch.zeros(d, h, w)
    prob[k] = 1.0
    return prob


def test_aggregate_weighted_mean_example():
    colors = torch.zeros(2, 1, 3, 1, 1)
    colors[0] = 0.8
    colors[1] = 0.4
    valid = torch.ones(2, 1, 1, 1, 1, dtype=torch.bool)
    weights = torch.tensor([0.75, 0.25]).reshape(2, 1, 1, 1)
    prob = torch.ones(1, 1, 1)
    out = rendering.aggregate(colors, valid, weights, prob)
    torch.testing.assert_close(out.image, torch.full((3, 1, 1), 0.7), atol=1e-6, rtol=0)


def test_aggregate_depth_delta_selects_plane():
    torch.manual_seed(0)
    colors = torch.rand(2, 4, 3, 2, 2)
    valid = torch.ones(2, 4, 1, 2, 2, dtype=torch.bool)
    weights = torch.full((2, 4, 2, 2), 0.5)
    for k in range(4):
        out = rendering.aggregate(colors, valid, weights, _delta_prob(4, 2, 2, k))
        expect = colors[:, k].mean(dim=0)
        torch.testing.assert_close(out.image, expect, atol=1e-6, rtol=0)
        torch.testing.assert_close(out.source_warps, colors[:, k], atol=1e-6, rtol=0)


def test_aggregate_invalid_source_is_renormalized_away():
    colors = torch.zeros(2, 1, 3, 1, 1)
    colors[0] = 0.9
    valid = torch.ones(2, 1, 1, 1, 1, dtype=torch.bool)
    valid[1] = False
    weights = torch.tensor([0.1, 0.9]).reshape(2, 1, 1, 1)
    prob = torch.ones(1, 1, 1)
    out = rendering.aggregate(colors, valid, weights, prob)
    torch.testing.assert_close(out.image, torch.full((3, 1, 1), 0.9), atol=1e-6, rtol=0)


def test_aggregate_no_valid_source_gives_zero():
    colors = torch.zeros(2, 1, 3, 1, 1)
    valid = torch.zeros(2, 1, 1, 1, 1, dtype=torch.bool)
    weights = torch.full((2, 1, 1, 1), 0.5)
    prob = torch.ones(1, 1, 1)
    out = rendering.aggregate(colors, valid, weights, prob)
    assert (out.image == 0).all()
    assert torch.isfinite(out.image).all()


def test_aggregate_shape_validation():
    colors = torch.zeros(2, 3, 3, 4, 4)
    valid = torch.ones(2, 3, 1, 4, 4, dtype=torch.bool)
    weights = torch.full((2, 3, 4, 4), 0.5)
    prob = torch.full((3, 4, 4), 1 / 3)
    rendering.aggregate(colors, valid, weights, prob)
    with pytest.raises(ValueError):
        rendering.aggregate(colors, valid[:, :1], weights, prob)
    with pytest.raises(ValueError):
        rendering.aggregate(colors, valid, weights[:1], prob)
    with pytest.raises(ValueError):
        rendering.aggregate(colors, valid, weights, prob[:1])


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_aggregate_image_stays_in_convex_envelope(seed):
    g = torch.Generator().manual_seed(seed)
    n, d, h, w = 3, 4, 3, 3
    colors = torch.rand(n, d, 3, h, w, generator=g)
    valid = torch.ones(n, d, 1, h, w, dtype=torch.bool)
    weights = rendering.blend_weights(torch.randn(n, d, h, w, generator=g))
    prob = torch.softmax(torch.randn(d, h, w, generator=g), dim=0)
    out = rendering.aggregate(colors, valid, weights, prob)
    lo = colors.amin(dim=(0, 1))
    hi = colors.amax(dim=(0, 1))
    assert (out.image >= lo - 1e-5).all()
    assert (out.image <= hi + 1e-5).all()


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_aggregate_is_source_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    n, d, h, w = 4, 3, 3, 3
    colors = torch.rand(n, d, 3, h, w, generator=g)
    valid = torch.rand(n, d, 1, h, w, generator=g) > 0.2
    colors = colors * valid
    weights = rendering.blend_weights(torch.randn(n, d, h, w, generator=g))
    prob = torch.softmax(torch.randn(d, h, w, generator=g), dim=0)
    out = rendering.aggregate(colors, valid, weights, prob)
    perm = torch.randperm(n, generator=g)
    out_p = rendering.aggregate(colors[perm], valid[perm], weights[perm], prob)
    torch.testing.assert_close(out_p.image, out.image, atol=1e-5, rtol=0)
    torch.testing.assert_close(out_p.source_warps, out.source_warps[perm],
                               atol=1e-5, rtol=0)


# ---------------------------------------------------------------------------
# over-compositing


def test_over_composite_opaque_first_plane():
    colors = torch.rand(3, 3, 2, 2)
    alpha = torch.zeros(3, 2, 2)
    alpha[0] = 1.0
    out = rendering.over_composite(alpha, colors)
    torch.testing.assert_close(out.image, colors[0], atol=1e-6, rtol=0)
    torch.testing.assert_close(out.accumulated, torch.ones(2, 2), atol=1e-6, rtol=0)


def test_over_composite_half_alphas():
    colors = torch.zeros(2, 3, 1, 1)
    colors[0] = 1.0
    colors[1] = 0.5
    alpha = torch.full((2, 1, 1), 0.5)
    out = rendering.over_composite(alpha, colors)
    torch.testing.assert_close(out.plane_weights[:, 0, 0], torch.tensor([0.5, 0.25]),
                               atol=1e-6, rtol=0)
    assert out.accumulated[0, 0] == pytest.approx(0.75, abs=1e-6)
    assert out.image[0, 0, 0] == pytest.approx(0.5 * 1.0 + 0.25 * 0.5, abs=1e-6)


def test_over_composite_zero_alpha_is_empty():
    out = rendering.over_composite(torch.zeros(3, 2, 2), torch.rand(3, 3, 2, 2))
    assert (out.image == 0).all()
    assert (out.accumulated == 0).all()


def test_over_composite_rejects_out_of_range_alpha():
    colors = torch.rand(2, 3, 2, 2)
    with pytest.raises(ValueError):
        rendering.over_composite(torch.full((2, 2, 2), 1.5), colors)
    with pytest.raises(ValueError):
        rendering.over_composite(torch.full((2, 2, 2), -0.1), colors)
    with pytest.raises(ValueError):
        rendering.over_composite(torch.zeros(3, 2, 2), colors)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_over_composite_weights_form_partial_distribution(seed):
    g = torch.Generator().manual_seed(seed)
    d = int(torch.randint(2, 7, (1,), generator=g))
    alpha = torch.rand(d, 3, 3, generator=g)
    colors = torch.rand(d, 3, 3, 3, generator=g)
    out = rendering.over_composite(alpha, colors)
    assert (out.plane_weights >= -1e-7).all()
    total = out.plane_weights.sum(dim=0)
    assert (total <= 1.0 + 1e-5).all()
    torch.testing.assert_close(out.accumulated, total, atol=1e-6, rtol=0)
    # transmittance after each plane never increases
    trans = torch.cumprod(1 - alpha, dim=0)
    assert (trans[1:] <= trans[:-1] + 1e-6).all()
