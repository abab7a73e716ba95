"""Patches to tokens: point encoder, order-aware pooling, branch fusion.

The point encoder is a two-layer pointwise MLP (3 -> d_mid -> d, SiLU in
between) followed by a coordinatewise max over the K patch points.  The
order embedding modulates tokens residually before a max over the token
axis produces one summary vector per branch.  Cross-branch fusion is a
zero-initialized gated residual mix, so at initialization each branch
passes through unchanged.

All functions accept arrays or Tensors; batched leading axes are fine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InternalError


@dataclass
class TokenizerParams:
    """Point-encoder weights plus the order/fusion extras of one model."""

    w1: Tensor  # (d_mid, 3)
    b1: Tensor  # (d_mid,)
    w2: Tensor  # (d, d_mid)
    b2: Tensor  # (d,)
    order_embed: tuple[Tensor, Tensor]  # per-branch (d_o,)
    g_w: Tensor  # (d, d) bias-free token transform
    phi_w: Tensor  # (d, d_o)
    phi_b: Tensor  # (d,)


@dataclass
class FusionParams:
    gate: Tensor  # (d,), zero-initialized


@dataclass
class TokenSequence:
    """Tokens of one serialization branch; tokens has shape (..., n, d)."""

    tokens: Tensor
    branch: int


def encode_patches(patches, params: TokenizerParams, branch: int = 1) -> TokenSequence:
    """Encode re-centered neighborhoods into (..., n, d) tokens.

    ``patches`` may be a serialized patch set, a bare PatchSet, or a
    (..., n, K, 3) array of neighborhood offsets.
    """
    neighborhoods = patches
    if hasattr(patches, "patches") and patches.patches is not None:
        neighborhoods = patches.patches.neighborhoods
    elif hasattr(patches, "neighborhoods"):
        neighborhoods = patches.neighborhoods
    p = ad.as_tensor(neighborhoods)
    hidden = ad.silu(ad.matmul(p, ad.swapaxes(params.w1, 0, 1)) + params.b1)
    per_point = ad.matmul(hidden, ad.swapaxes(params.w2, 0, 1)) + params.b2
    return TokenSequence(per_point.max(axis=-2), branch)


def order_aware_global(seq: TokenSequence, params: TokenizerParams) -> Tensor:
    """Summary vector e = MaxPool_n(E + G(E) * phi(o)) for one branch."""
    e_tokens = seq.tokens
    o = params.order_embed[seq.branch - 1]
    modulation = ad.matmul(params.phi_w, ad.reshape(o, (-1, 1)))
    modulation = ad.reshape(modulation, (-1,)) + params.phi_b
    transformed = ad.matmul(e_tokens, ad.swapaxes(params.g_w, 0, 1))
    return (e_tokens + transformed * modulation).max(axis=-2)


def _alignment(order_self: np.ndarray, order_other: np.ndarray) -> np.ndarray:
    """Positions in the other branch of the patches at our positions."""
    inv_other = np.empty_like(order_other)
    np.put_along_axis(
        inv_other, order_other, np.broadcast_to(
            np.arange(order_other.shape[-1]), order_other.shape).copy(),
        axis=-1)
    return np.take_along_axis(inv_other, order_self, axis=-1)


def fuse_branches(
    seq1: TokenSequence,
    seq2: TokenSequence,
    fusion: FusionParams,
    order1: np.ndarray,
    order2: np.ndarray,
) -> tuple[TokenSequence, TokenSequence]:
    """Gated residual mix of the two serialization branches.

    Z0(k) = E(k) + gate * align(E(other)), where align re-permutes the
    other branch's tokens into branch k's serialization order through the
    shared original patch indices.  ``order1``/``order2`` map serialized
    position -> original patch index, shaped (n,) or (B, n).
    """
    order1 = np.asarray(order1, dtype=np.int64)
    order2 = np.asarray(order2, dtype=np.int64)
    if not np.array_equal(np.sort(order1, axis=-1), np.sort(order2, axis=-1)):
        raise InternalError("branches do not share a patch index set")
    map_1from2 = _alignment(order1, order2)
    map_2from1 = _alignment(order2, order1)
    e1, e2 = seq1.tokens, seq2.tokens
    if e1.ndim == 2:
        aligned2 = ad.take(e2, map_1from2, axis=0)
        aligned1 = ad.take(e1, map_2from1, axis=0)
    else:
        aligned2 = ad.gather_rows(e2, map_1from2)
        aligned1 = ad.gather_rows(e1, map_2from1)
    z1 = e1 + fusion.gate * aligned2
    z2 = e2 + fusion.gate * aligned1
    return TokenSequence(z1, seq1.branch), TokenSequence(z2, seq2.branch)
