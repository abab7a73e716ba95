"""Space-filling-curve codes and deterministic key-point ordering.

Hilbert codes use the transposition algorithm: coordinates are folded
into the curve's "transpose" form by Gray-coding and per-level bit
exchanges, then interleaved into a single integer.  Any fixed
orientation convention satisfies the contracts that matter here
(bijectivity, unit grid distance between consecutive cells); this one
puts cell (0,0,0) at code 0.

The transposed variants apply the cyclic axis permutation
(x, y, z) -> (z, x, y) before encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ArgumentError, ValidationError
from .geometry import KeyPoints, PatchSet

_NDIM = 3


@dataclass(frozen=True)
class CurveKind:
    """One of the five supported serializations.

    ``kind`` is "hilbert", "trans-hilbert", "z", "trans-z", or "random";
    ``seed`` is only meaningful for "random".
    """

    kind: str
    seed: int | None = None

    _KINDS = ("hilbert", "trans-hilbert", "z", "trans-z", "random")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ArgumentError(f"unknown curve kind {self.kind!r}")
        if self.kind == "random" and self.seed is None:
            object.__setattr__(self, "seed", 0)

    @classmethod
    def parse(cls, spec: str) -> "CurveKind":
        """Parse a CLI flag string: "hilbert", ..., or "random:<seed>"."""
        if spec.startswith("random"):
            _, _, tail = spec.partition(":")
            return cls("random", int(tail) if tail else 0)
        return cls(spec)

    def __str__(self):
        return f"random:{self.seed}" if self.kind == "random" else self.kind


# -- Hilbert transposition ---------------------------------------------------


def _axes_to_transpose(x: int, y: int, z: int, bits: int) -> list[int]:
    w = [x, y, z]
    m = 1 << (bits - 1)
    q = m
    while q > 1:
        p = q - 1
        for i in range(_NDIM):
            if w[i] & q:
                w[0] ^= p
            else:
                t = (w[0] ^ w[i]) & p
                w[0] ^= t
                w[i] ^= t
        q >>= 1
    for i in range(1, _NDIM):
        w[i] ^= w[i - 1]
    t = 0
    q = m
    while q > 1:
        if w[_NDIM - 1] & q:
            t ^= q - 1
        q >>= 1
    for i in range(_NDIM):
        w[i] ^= t
    return w


def _transpose_to_axes(w: list[int], bits: int) -> list[int]:
    n = 2 << (bits - 1)
    t = w[_NDIM - 1] >> 1
    for i in range(_NDIM - 1, 0, -1):
        w[i] ^= w[i - 1]
    w[0] ^= t
    q = 2
    while q != n:
        p = q - 1
        for i in range(_NDIM - 1, -1, -1):
            if w[i] & q:
                w[0] ^= p
            else:
                t = (w[0] ^ w[i]) & p
                w[0] ^= t
                w[i] ^= t
        q <<= 1
    return w


def _interleave(w, bits: int) -> int:
    code = 0
    for q in range(bits - 1, -1, -1):
        for i in range(_NDIM):
            code = (code << 1) | ((w[i] >> q) & 1)
    return code


def _deinterleave(code: int, bits: int) -> list[int]:
    w = [0] * _NDIM
    for q in range(bits):
        for i in range(_NDIM):
            w[i] |= ((code >> (_NDIM * q + (_NDIM - 1 - i))) & 1) << q
    return w


def _check_cell(point, bits: int) -> tuple[int, int, int]:
    limit = 1 << bits
    x, y, z = (int(v) for v in point)
    if not (0 <= x < limit and 0 <= y < limit and 0 <= z < limit):
        raise ArgumentError(f"cell {(x, y, z)} outside the {bits}-bit grid")
    return x, y, z


def hilbert_code_3d(point, bits: int) -> int:
    """Hilbert index of a grid cell; bijective on [0, 2^bits)^3."""
    x, y, z = _check_cell(point, bits)
    return _interleave(_axes_to_transpose(x, y, z, bits), bits)


def hilbert_decode_3d(code: int, bits: int) -> tuple[int, int, int]:
    """Inverse of :func:`hilbert_code_3d`."""
    if not 0 <= code < 1 << (_NDIM * bits):
        raise ArgumentError(f"code {code} outside [0, 2^{_NDIM * bits})")
    x, y, z = _transpose_to_axes(_deinterleave(code, bits), bits)
    return x, y, z


def zorder_code_3d(point, bits: int) -> int:
    """Morton code: bit q of x, y, z lands at 3q+2, 3q+1, 3q."""
    x, y, z = _check_cell(point, bits)
    return _interleave([x, y, z], bits)


def curve_code(point, bits: int, curve: CurveKind) -> int:
    x, y, z = _check_cell(point, bits)
    if curve.kind == "hilbert":
        return hilbert_code_3d((x, y, z), bits)
    if curve.kind == "trans-hilbert":
        return hilbert_code_3d((z, x, y), bits)
    if curve.kind == "z":
        return zorder_code_3d((x, y, z), bits)
    if curve.kind == "trans-z":
        return zorder_code_3d((z, x, y), bits)
    raise ArgumentError(f"no curve code for kind {curve.kind!r}")


# -- key-point serialization -------------------------------------------------


@dataclass(frozen=True)
class SerializedPatchSet:
    """Key points (and optionally their patches) in curve order.

    ``order[j]`` is the original center index sitting at serialized
    position j.  ``codes[j]`` is that center's curve index; for the
    random curve it stores the original index instead, since no curve
    code exists.
    """

    order: np.ndarray
    curve: CurveKind
    codes: np.ndarray
    centers: KeyPoints
    patches: PatchSet | None = None

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        n = len(order)
        if sorted(order.tolist()) != list(range(n)):
            raise ValidationError("order is not a permutation")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "codes", np.asarray(self.codes, dtype=np.uint64))

    @property
    def count(self) -> int:
        return len(self.order)


def quantize_unit_coords(coords: np.ndarray, bits: int) -> np.ndarray:
    """Map [-1, 1] coordinates onto the b-bit grid by round-half-up."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.min() < -1.0 - 1e-9 or coords.max() > 1.0 + 1e-9:
        raise ValidationError("coordinates must lie in [-1, 1] before quantization")
    scaled = (np.clip(coords, -1.0, 1.0) + 1.0) / 2.0 * ((1 << bits) - 1)
    return np.floor(scaled + 0.5).astype(np.int64)


def serialize_keypoints(
    centers: KeyPoints, curve: CurveKind, bits: int = 10
) -> SerializedPatchSet:
    """Order key points along a space-filling curve (or shuffle for random).

    Equal codes keep their original relative index order (stable sort).
    """
    n = centers.count
    if curve.kind == "random":
        rng = np.random.default_rng(curve.seed)
        order = rng.permutation(n).astype(np.int64)
        codes = order.astype(np.uint64)
    else:
        cells = quantize_unit_coords(centers.coords, bits)
        codes_orig = np.array(
            [curve_code(c, bits, curve) for c in cells], dtype=np.uint64
        )
        order = np.argsort(codes_orig, kind="stable").astype(np.int64)
        codes = codes_orig[order]
    reordered = KeyPoints(centers.indices[order], centers.coords[order])
    return SerializedPatchSet(order, curve, codes, reordered)


def attach_patches(sps: SerializedPatchSet, patches: PatchSet) -> SerializedPatchSet:
    """Attach patches built in the ORIGINAL center order, reordering them."""
    nb = patches.neighborhoods[sps.order]
    return replace(sps, patches=PatchSet(sps.centers, nb))
