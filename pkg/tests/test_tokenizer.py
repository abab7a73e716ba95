"""Tokenizer contracts against straight-line scalar-loop oracles."""

import numpy as np
from numpy.testing import assert_allclose

from mantis_lab.autodiff import Tensor
from mantis_lab.geometry import PointCloud, farthest_point_sample, knn_patches
from mantis_lab.tokenizer import (FusionParams, TokenSequence, TokenizerParams,
                                  encode_patches, fuse_branches,
                                  order_aware_global)


def make_params(rng, d=6, d_mid=3, d_o=4, zero=False):
    def w(*shape):
        return Tensor(np.zeros(shape) if zero else rng.normal(size=shape))

    return TokenizerParams(
        w1=w(d_mid, 3), b1=w(d_mid), w2=w(d, d_mid), b2=w(d),
        order_embed=(w(d_o), w(d_o)), g_w=w(d, d), phi_w=w(d, d_o),
        phi_b=w(d))


def silu(x):
    return x / (1.0 + np.exp(-x))


def encode_oracle(patch, params):
    """Scalar-loop evaluation of the two-layer map and coordinatewise max."""
    k = patch.shape[0]
    d = params.w2.data.shape[0]
    best = np.full(d, -np.inf)
    for point in range(k):
        hid = silu(params.w1.data @ patch[point] + params.b1.data)
        out = params.w2.data @ hid + params.b2.data
        best = np.maximum(best, out)
    return best


def test_zero_weights_give_zero_tokens():
    rng = np.random.default_rng(0)
    params = make_params(rng, zero=True)
    patches = rng.normal(size=(5, 4, 3))
    seq = encode_patches(patches, params)
    assert_allclose(seq.tokens.data, 0.0)


def test_duplicated_points_leave_token_unchanged():
    rng = np.random.default_rng(1)
    params = make_params(rng)
    patch = rng.normal(size=(1, 4, 3))
    doubled = np.concatenate([patch, patch], axis=1)
    t1 = encode_patches(patch, params).tokens.data
    t2 = encode_patches(doubled, params).tokens.data
    assert_allclose(t1, t2)


def test_encode_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    params = make_params(rng)
    patches = rng.normal(size=(3, 5, 3))
    seq = encode_patches(patches, params)
    for i in range(3):
        assert_allclose(seq.tokens.data[i], encode_oracle(patches[i], params),
                        rtol=1e-12)


def order_aware_oracle(tokens, o, params):
    n, d = tokens.shape
    modulation = params.phi_w.data @ o + params.phi_b.data
    best = np.full(d, -np.inf)
    for i in range(n):
        g = params.g_w.data @ tokens[i]
        row = tokens[i] + g * modulation
        best = np.maximum(best, row)
    return best


def test_order_aware_zero_modulation_collapses_to_maxpool():
    rng = np.random.default_rng(3)
    params = make_params(rng)
    params.phi_w.data[:] = 0.0
    params.phi_b.data[:] = 0.0
    tokens = rng.normal(size=(7, 6))
    e = order_aware_global(TokenSequence(Tensor(tokens), 1), params)
    assert_allclose(e.data, tokens.max(axis=0), rtol=1e-15)


def test_order_aware_single_token():
    rng = np.random.default_rng(4)
    params = make_params(rng)
    tokens = rng.normal(size=(1, 6))
    e = order_aware_global(TokenSequence(Tensor(tokens), 2), params)
    o = params.order_embed[1].data
    want = tokens[0] + (params.g_w.data @ tokens[0]) * (
        params.phi_w.data @ o + params.phi_b.data)
    assert_allclose(e.data, want, rtol=1e-12)


def test_order_aware_matches_loop_oracle():
    rng = np.random.default_rng(5)
    params = make_params(rng)
    tokens = rng.normal(size=(9, 6))
    e = order_aware_global(TokenSequence(Tensor(tokens), 1), params)
    want = order_aware_oracle(tokens, params.order_embed[0].data, params)
    assert_allclose(e.data, want, rtol=1e-12)


def fuse_oracle(e1, e2, gate, order1, order2):
    n = len(order1)
    pos2 = {orig: j for j, orig in enumerate(order2)}
    pos1 = {orig: j for j, orig in enumerate(order1)}
    z1 = np.array([e1[i] + gate * e2[pos2[order1[i]]] for i in range(n)])
    z2 = np.array([e2[i] + gate * e1[pos1[order2[i]]] for i in range(n)])
    return z1, z2


def test_fusion_zero_gate_is_identity():
    rng = np.random.default_rng(6)
    e1, e2 = rng.normal(size=(2, 8, 6))
    order1 = rng.permutation(8)
    order2 = rng.permutation(8)
    z1, z2 = fuse_branches(
        TokenSequence(Tensor(e1), 1), TokenSequence(Tensor(e2), 2),
        FusionParams(Tensor(np.zeros(6))), order1, order2)
    assert_allclose(z1.tokens.data, e1)
    assert_allclose(z2.tokens.data, e2)


def test_fusion_identical_orders_unit_gate_sums_tokens():
    rng = np.random.default_rng(7)
    e1, e2 = rng.normal(size=(2, 5, 6))
    order = np.arange(5)
    z1, z2 = fuse_branches(
        TokenSequence(Tensor(e1), 1), TokenSequence(Tensor(e2), 2),
        FusionParams(Tensor(np.ones(6))), order, order)
    assert_allclose(z1.tokens.data, e1 + e2)
    assert_allclose(z2.tokens.data, e1 + e2)


def test_fusion_matches_loop_oracle():
    rng = np.random.default_rng(8)
    e1, e2 = rng.normal(size=(2, 8, 6))
    gate = rng.normal(size=6)
    order1, order2 = rng.permutation(8), rng.permutation(8)
    z1, z2 = fuse_branches(
        TokenSequence(Tensor(e1), 1), TokenSequence(Tensor(e2), 2),
        FusionParams(Tensor(gate)), order1, order2)
    w1, w2 = fuse_oracle(e1, e2, gate, order1, order2)
    assert_allclose(z1.tokens.data, w1, rtol=1e-12)
    assert_allclose(z2.tokens.data, w2, rtol=1e-12)


def test_fusion_batched_matches_per_sample():
    rng = np.random.default_rng(9)
    e1, e2 = rng.normal(size=(2, 3, 8, 6))
    gate = rng.normal(size=6)
    orders1 = np.stack([rng.permutation(8) for _ in range(3)])
    orders2 = np.stack([rng.permutation(8) for _ in range(3)])
    z1, z2 = fuse_branches(
        TokenSequence(Tensor(e1), 1), TokenSequence(Tensor(e2), 2),
        FusionParams(Tensor(gate)), orders1, orders2)
    for b in range(3):
        w1, w2 = fuse_oracle(e1[b], e2[b], gate, orders1[b], orders2[b])
        assert_allclose(z1.tokens.data[b], w1, rtol=1e-12)
        assert_allclose(z2.tokens.data[b], w2, rtol=1e-12)


def test_tokens_translation_invariant_end_to_end():
    rng = np.random.default_rng(10)
    params = make_params(rng)
    pts = rng.normal(size=(40, 3))
    shift = np.array([3.0, -2.0, 1.5])
    tokens = {}
    for tag, cloud_pts in (("base", pts), ("moved", pts + shift)):
        cloud = PointCloud(cloud_pts)
        centers = farthest_point_sample(cloud, 8)
        patches = knn_patches(cloud, centers, 5)
        tokens[tag] = encode_patches(patches.neighborhoods, params).tokens.data
    assert_allclose(tokens["base"], tokens["moved"], atol=1e-12)


def test_branch_token_multisets_agree_before_fusion():
    rng = np.random.default_rng(11)
    params = make_params(rng)
    patches = rng.normal(size=(10, 4, 3))
    order1, order2 = rng.permutation(10), rng.permutation(10)
    t1 = encode_patches(patches[order1], params, branch=1).tokens.data
    t2 = encode_patches(patches[order2], params, branch=2).tokens.data
    key = lambda arr: sorted(map(tuple, np.round(arr, 12)))
    assert key(t1) == key(t2)
