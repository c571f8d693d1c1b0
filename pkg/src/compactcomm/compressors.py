"""Codec family for activation/residual tensors with exact bit accounting.

Every encoder produces a payload object that can reconstruct a float32
matrix deterministically and knows its exact size in bits. Serialized
frame layout (all little-endian):

    [tag: u8][rows: u32][cols: u32][codec meta][codec body]

Codec bodies:

  raw        f32 entries, row-major. Carries exact 32-bit data so that
             warmup/identity transmission is lossless; ratio and ledger
             accounting count raw transfers at the 16-bit nominal
             baseline (see nominal_bits).
  sign1bit   sign bitmap (1 bit/elem, row-major, little bit order,
             bit set = negative, sign(0) = +1), then row scales u (N f32)
             and column scales v (C f32).
  quant2bit  2-bit codes (4/byte, little-end first; 0:-2 1:-0.5 2:+0.5
             3:+2), then u, v as above.
  lowrank    meta r: u32. Factor U (rows x r) then W (cols x r), both
             column-major f16. decode = U @ W^T.
  lowrank4   meta r: u32. 2r f32 per-column ranges (U columns then W
             columns), then one contiguous nibble stream (two codes per
             byte, low nibble first) of U then W, column-major. Each
             column is quantized to 16 uniform levels over [-range, +range].
  nmblock    meta n: u16, m: u16. Column count is zero-padded to a
             multiple of m; per contiguous 1 x m block the n
             largest-|value| entries are kept (ties -> lowest index).
             Body: block masks as one contiguous bitstream (m bits per
             block), then kept values as f16 in ascending position order.
  topk       meta k: u32. Flat indices (u32, ascending) of the k
             largest-|value| entries, then their values as f16.

bit_size is the exact information size of the body (data + scales/masks,
excluding the frame header and fixed meta ints); serializing a body takes
ceil(bit_size / 8) bytes. payload_only_bits counts just the value data at
its nominal width (the paper-style headline ratio); nominal_bits adds the
scale/mask overhead and is what the byte ledger charges.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import linalg
from .linalg import ShapeError

U_FLOOR = 1e-30  # keeps row scales strictly positive for all-zero rows

QUANT2_LEVELS = np.array([-2.0, -0.5, 0.5, 2.0], dtype=np.float64)

TAG_RAW = 0
TAG_SIGN1BIT = 1
TAG_QUANT2BIT = 2
TAG_LOWRANK = 3
TAG_LOWRANK_INT4 = 4
TAG_NMBLOCK = 5
TAG_TOPK = 6

_HEADER = struct.Struct("<BII")


class PayloadError(ValueError):
    """Raised when a serialized payload is malformed; names the codec."""


class CompressorKind(str, Enum):
    IDENTITY = "identity"
    SIGN1BIT = "sign1bit"
    QUANT2BIT = "quant2bit"
    LOWRANK = "lowrank"
    NM_BLOCK = "nm_block"
    TOPK = "topk"


@dataclass(frozen=True)
class CompressorSpec:
    kind: CompressorKind
    rank: int = 0
    iterations: int = 1
    int4_factors: bool = False
    n: int = 0
    m: int = 0
    keep_fraction: float = 0.0

    def __post_init__(self):
        k = self.kind
        if k == CompressorKind.LOWRANK:
            if self.rank < 1 or self.iterations < 1:
                raise ValueError("lowrank needs rank >= 1 and iterations >= 1")
        elif k == CompressorKind.NM_BLOCK:
            if not (1 <= self.n <= self.m):
                raise ValueError("nm_block needs 1 <= n <= m")
        elif k == CompressorKind.TOPK:
            if not (0.0 < self.keep_fraction <= 1.0):
                raise ValueError("topk needs keep_fraction in (0, 1]")

    def label(self):
        k = self.kind
        if k == CompressorKind.LOWRANK:
            return f"lowrank-r{self.rank}-{'int4' if self.int4_factors else 'f16'}"
        if k == CompressorKind.NM_BLOCK:
            return f"nm{self.n}:{self.m}"
        if k == CompressorKind.TOPK:
            return f"topk{self.keep_fraction:g}"
        return k.value

    @staticmethod
    def from_dict(d):
        kind = CompressorKind(d["kind"])
        return CompressorSpec(
            kind=kind,
            rank=int(d.get("rank", 0)),
            iterations=int(d.get("iterations", 1)),
            int4_factors=bool(d.get("int4_factors", False)),
            n=int(d.get("n", 0)),
            m=int(d.get("m", 0)),
            keep_fraction=float(d.get("keep_fraction", 0.0)),
        )


@dataclass(frozen=True)
class ScalePair:
    u: np.ndarray  # length N, strictly positive
    v: np.ndarray  # length C, nonnegative

    def outer(self):
        return np.outer(self.u.astype(np.float64), self.v.astype(np.float64))


def scale_estimate(x):
    """Rank-1 magnitude scales: u_i = rowmean|X| / mean|X|, v_j = colmean|X|.

    All-zero input degenerates to u = ones, v = zeros so the decoded
    magnitude field is exactly zero.
    """
    a = np.abs(np.asarray(x, dtype=np.float64))
    g = float(a.mean())
    if g == 0.0:
        u = np.ones(x.shape[0], dtype=np.float32)
        v = np.zeros(x.shape[1], dtype=np.float32)
        return ScalePair(u, v)
    u = np.maximum(a.mean(axis=1) / g, U_FLOOR).astype(np.float32)
    v = a.mean(axis=0).astype(np.float32)
    return ScalePair(u, v)


# ---------------------------------------------------------------------------
# payload types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawPayload:
    rows: int
    cols: int
    data: np.ndarray  # float32

    tag = TAG_RAW
    kind_label = "raw"

    @property
    def bit_size(self):
        return 32 * self.rows * self.cols

    @property
    def nominal_bits(self):
        # raw transfers are charged at the 16-bit activation baseline
        return 16 * self.rows * self.cols

    @property
    def payload_only_bits(self):
        return 16 * self.rows * self.cols

    def decode(self):
        return linalg.freeze(self.data.copy())


@dataclass(frozen=True)
class SignPayload:
    rows: int
    cols: int
    neg_bits: np.ndarray  # packed bitmap, little bit order
    u: np.ndarray
    v: np.ndarray

    tag = TAG_SIGN1BIT
    kind_label = "sign1bit"

    @property
    def bit_size(self):
        return self.rows * self.cols + 32 * (self.rows + self.cols)

    @property
    def nominal_bits(self):
        return self.bit_size

    @property
    def payload_only_bits(self):
        return self.rows * self.cols

    def decode(self):
        n = self.rows * self.cols
        bits = np.unpackbits(self.neg_bits, count=n, bitorder="little")
        signs = np.where(bits == 1, -1.0, 1.0).reshape(self.rows, self.cols)
        out = signs * np.outer(self.u.astype(np.float64), self.v.astype(np.float64))
        return linalg.freeze(out.astype(np.float32))


@dataclass(frozen=True)
class Quant2Payload:
    rows: int
    cols: int
    codes: np.ndarray  # packed, 4 codes/byte
    u: np.ndarray
    v: np.ndarray

    tag = TAG_QUANT2BIT
    kind_label = "quant2bit"

    @property
    def bit_size(self):
        return 2 * self.rows * self.cols + 32 * (self.rows + self.cols)

    @property
    def nominal_bits(self):
        return self.bit_size

    @property
    def payload_only_bits(self):
        return 2 * self.rows * self.cols

    def decode(self):
        n = self.rows * self.cols
        codes = _unpack_crumbs(self.codes, n)
        levels = QUANT2_LEVELS[codes].reshape(self.rows, self.cols)
        out = levels * np.outer(self.u.astype(np.float64), self.v.astype(np.float64))
        return linalg.freeze(out.astype(np.float32))


@dataclass(frozen=True)
class LowRankPayload:
    rows: int
    cols: int
    rank: int
    int4: bool
    # f16 factors when int4 is False; otherwise uint8 codes 0..15 plus ranges
    u_factor: np.ndarray
    w_factor: np.ndarray
    u_range: np.ndarray | None = None
    w_range: np.ndarray | None = None

    kind_label = "lowrank"

    @property
    def tag(self):
        return TAG_LOWRANK_INT4 if self.int4 else TAG_LOWRANK

    @property
    def bit_size(self):
        per_entry = 4 if self.int4 else 16
        scale_bits = 32 * 2 * self.rank if self.int4 else 0
        return per_entry * self.rank * (self.rows + self.cols) + scale_bits

    @property
    def nominal_bits(self):
        return self.bit_size

    @property
    def payload_only_bits(self):
        per_entry = 4 if self.int4 else 16
        return per_entry * self.rank * (self.rows + self.cols)

    def factors(self):
        """Dequantized (U, W) as float64 arrays."""
        if not self.int4:
            return self.u_factor.astype(np.float64), self.w_factor.astype(np.float64)
        u = _int4_dequant(self.u_factor, self.u_range)
        w = _int4_dequant(self.w_factor, self.w_range)
        return u, w

    def decode(self):
        u, w = self.factors()
        return linalg.freeze((u @ w.T).astype(np.float32))


@dataclass(frozen=True)
class NMBlockPayload:
    rows: int
    cols: int
    n: int
    m: int
    masks: np.ndarray  # packed bitstream, m bits per block
    values: np.ndarray  # f16, n per block

    tag = TAG_NMBLOCK
    kind_label = "nmblock"

    @property
    def padded_cols(self):
        return -(-self.cols // self.m) * self.m

    @property
    def block_count(self):
        return self.rows * (self.padded_cols // self.m)

    @property
    def bit_size(self):
        return self.block_count * (self.m + 16 * self.n)

    @property
    def nominal_bits(self):
        return self.bit_size

    @property
    def payload_only_bits(self):
        return self.block_count * 16 * self.n

    def decode(self):
        total = self.block_count * self.m
        mask = np.unpackbits(self.masks, count=total, bitorder="little").astype(bool)
        flat = np.zeros(total, dtype=np.float32)
        flat[mask] = self.values.astype(np.float32)
        padded = flat.reshape(self.rows, self.padded_cols)
        return linalg.freeze(np.ascontiguousarray(padded[:, : self.cols]))


@dataclass(frozen=True)
class TopKPayload:
    rows: int
    cols: int
    indices: np.ndarray  # u32 flat indices, ascending
    values: np.ndarray  # f16

    tag = TAG_TOPK
    kind_label = "topk"

    @property
    def kept(self):
        return int(self.indices.size)

    @property
    def bit_size(self):
        return 48 * self.kept

    @property
    def nominal_bits(self):
        return self.bit_size

    @property
    def payload_only_bits(self):
        return 16 * self.kept

    def decode(self):
        flat = np.zeros(self.rows * self.cols, dtype=np.float32)
        flat[self.indices.astype(np.int64)] = self.values.astype(np.float32)
        return linalg.freeze(flat.reshape(self.rows, self.cols))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def encode_raw(x):
    return RawPayload(x.shape[0], x.shape[1], np.ascontiguousarray(x, dtype=np.float32))


def encode_sign1bit(x):
    sp = scale_estimate(x)
    neg = (np.asarray(x) < 0).astype(np.uint8).ravel()
    return SignPayload(x.shape[0], x.shape[1], np.packbits(neg, bitorder="little"), sp.u, sp.v)


def encode_quant2bit(x):
    """Nearest level in {-2,-0.5,+0.5,+2} of x/(uv^T); ties go to the
    smaller magnitude, zero scale cells take the +0.5 code (decode 0)."""
    sp = scale_estimate(x)
    scale = sp.outer()
    normed = np.zeros_like(scale)
    nz = scale != 0.0
    normed[nz] = np.asarray(x, dtype=np.float64)[nz] / scale[nz]
    codes = np.full(x.shape, 2, dtype=np.uint8)  # +0.5 default (covers zero scale, n=0)
    codes[normed > 1.25] = 3
    codes[(normed < 0) & (normed >= -1.25)] = 1
    codes[normed < -1.25] = 0
    return Quant2Payload(x.shape[0], x.shape[1], _pack_crumbs(codes.ravel()), sp.u, sp.v)


def subspace_iteration(a, r, t, rng):
    """Randomized rank-r basis refinement.

    Starts from a random orthonormal Q, repeats Z = A^T (A Q),
    Q = orthogonalize(Z) t times, then returns U = orthogonalize(A Q)
    and V = Q. Rank-deficient inputs fall back on the degenerate-column
    replacement inside orthogonalize.
    """
    rows, cols = a.shape
    if not (1 <= r <= min(rows, cols)):
        raise ShapeError(f"rank {r} out of range for shape {a.shape}")
    if t < 1:
        raise ValueError("iterations must be >= 1")
    q = linalg.orthogonalize(linalg.gaussian_matrix(rng, cols, r), rng)
    for _ in range(t):
        z = linalg.matmul(a.T, linalg.matmul(a, q))
        q = linalg.orthogonalize(z, rng)
    u = linalg.orthogonalize(linalg.matmul(a, q), rng)
    return u, q


def encode_lowrank(a, spec, rng):
    if spec.kind != CompressorKind.LOWRANK:
        raise ValueError("spec.kind must be lowrank")
    u, _ = subspace_iteration(a, spec.rank, spec.iterations, rng)
    w = linalg.matmul(a.T, u)  # decode U @ W^T == U U^T A, an exact projection
    if spec.int4_factors:
        u_codes, u_range = _int4_quant(u)
        w_codes, w_range = _int4_quant(w)
        return LowRankPayload(a.shape[0], a.shape[1], spec.rank, True, u_codes, w_codes, u_range, w_range)
    return LowRankPayload(
        a.shape[0], a.shape[1], spec.rank, False, u.astype(np.float16), w.astype(np.float16)
    )


def encode_nm_block(x, n, m):
    """Keep the n largest-|value| entries of every 1 x m column block."""
    if not (1 <= n <= m):
        raise ValueError("need 1 <= n <= m")
    rows, cols = x.shape
    pad = (-cols) % m
    padded = np.pad(np.asarray(x, dtype=np.float32), ((0, 0), (0, pad)))
    blocks = padded.reshape(-1, m)
    # stable argsort on -|v| keeps the lowest index on ties
    order = np.argsort(-np.abs(blocks), axis=1, kind="stable")[:, :n]
    keep = np.sort(order, axis=1)
    mask = np.zeros_like(blocks, dtype=np.uint8)
    np.put_along_axis(mask, keep, 1, axis=1)
    values = np.take_along_axis(blocks, keep, axis=1).astype(np.float16).ravel()
    return NMBlockPayload(rows, cols, n, m, np.packbits(mask.ravel(), bitorder="little"), values)


def encode_topk(x, keep_fraction):
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must be in (0, 1]")
    rows, cols = x.shape
    size = rows * cols
    k = min(size, int(np.ceil(keep_fraction * size)))
    flat = np.asarray(x, dtype=np.float32).ravel()
    # primary key |value| desc, secondary key index asc
    order = np.lexsort((np.arange(size), -np.abs(flat)))[:k]
    idx = np.sort(order).astype(np.uint32)
    return TopKPayload(rows, cols, idx, flat[idx.astype(np.int64)].astype(np.float16))


def encode(x, spec, rng=None):
    """Encode with any CompressorSpec; lowrank requires an rng."""
    k = spec.kind
    if k == CompressorKind.IDENTITY:
        return encode_raw(x)
    if k == CompressorKind.SIGN1BIT:
        return encode_sign1bit(x)
    if k == CompressorKind.QUANT2BIT:
        return encode_quant2bit(x)
    if k == CompressorKind.LOWRANK:
        if rng is None:
            raise ValueError("lowrank encoding needs an rng")
        return encode_lowrank(x, spec, rng)
    if k == CompressorKind.NM_BLOCK:
        return encode_nm_block(x, spec.n, spec.m)
    if k == CompressorKind.TOPK:
        return encode_topk(x, spec.keep_fraction)
    raise ValueError(f"unknown codec kind {k}")


def decode(payload):
    """Deterministic reconstruction for any payload."""
    return payload.decode()


def empirical_delta(x, payload):
    """delta-hat = 1 - ||decode - X||^2 / ||X||^2 (may be negative)."""
    err = linalg.frob_norm_sq(decode(payload).astype(np.float64) - np.asarray(x, dtype=np.float64))
    total = linalg.frob_norm_sq(x)
    if total == 0.0:
        if err == 0.0:
            return 1.0  # exact on a zero input
        raise ValueError("empirical delta undefined: zero input, nonzero error")
    return 1.0 - err / total


# ---------------------------------------------------------------------------
# ratio accounting
# ---------------------------------------------------------------------------


def baseline_bits(rows, cols):
    """16-bit activation baseline for one transmission."""
    return 16 * rows * cols


def payload_only_ratio(p):
    return baseline_bits(p.rows, p.cols) / p.payload_only_bits


def overhead_ratio(p):
    return baseline_bits(p.rows, p.cols) / p.nominal_bits


def nominal_wire_bytes(p):
    """Bytes the ledger charges for one transmission of this payload."""
    return -(-p.nominal_bits // 8)


# ---------------------------------------------------------------------------
# bit packing helpers
# ---------------------------------------------------------------------------


def _pack_crumbs(codes):
    """Pack 2-bit codes four per byte, little-end first."""
    n = codes.size
    padded = np.zeros(-(-n // 4) * 4, dtype=np.uint8)
    padded[:n] = codes
    padded = padded.reshape(-1, 4)
    return (padded[:, 0] | padded[:, 1] << 2 | padded[:, 2] << 4 | padded[:, 3] << 6).astype(np.uint8)


def _unpack_crumbs(packed, n):
    out = np.empty((packed.size, 4), dtype=np.uint8)
    out[:, 0] = packed & 3
    out[:, 1] = (packed >> 2) & 3
    out[:, 2] = (packed >> 4) & 3
    out[:, 3] = (packed >> 6) & 3
    return out.ravel()[:n]


def _pack_nibbles(codes):
    n = codes.size
    padded = np.zeros(-(-n // 2) * 2, dtype=np.uint8)
    padded[:n] = codes
    padded = padded.reshape(-1, 2)
    return (padded[:, 0] | padded[:, 1] << 4).astype(np.uint8)


def _unpack_nibbles(packed, n):
    out = np.empty((packed.size, 2), dtype=np.uint8)
    out[:, 0] = packed & 15
    out[:, 1] = packed >> 4
    return out.ravel()[:n]


def _int4_quant(factor):
    """Per-column symmetric 16-level quantization; returns (codes, ranges)."""
    f = np.asarray(factor, dtype=np.float64)
    ranges = np.abs(f).max(axis=0)
    steps = 2.0 * ranges / 15.0
    codes = np.zeros(f.shape, dtype=np.uint8)
    nz = ranges > 0
    if np.any(nz):
        c = np.rint((f[:, nz] + ranges[nz]) / steps[nz])
        codes[:, nz] = np.clip(c, 0, 15).astype(np.uint8)
    return codes, ranges.astype(np.float32)


def _int4_dequant(codes, ranges):
    r = ranges.astype(np.float64)
    steps = 2.0 * r / 15.0
    return -r[None, :] + codes.astype(np.float64) * steps[None, :]


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------


def to_bytes(p):
    """Serialize a payload to its frame (header + meta + body)."""
    head = _HEADER.pack(p.tag, p.rows, p.cols)
    if p.tag == TAG_RAW:
        return head + np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    if p.tag == TAG_SIGN1BIT:
        return head + p.neg_bits.tobytes() +_f32le(p.u) + _f32le(p.v)
    if p.tag == TAG_QUANT2BIT:
        return head + p.codes.tobytes() + _f32le(p.u) + _f32le(p.v)
    if p.tag == TAG_LOWRANK:
        meta = struct.pack("<I", p.rank)
        return head + meta + _f16le_cm(p.u_factor) + _f16le_cm(p.w_factor)
    if p.tag == TAG_LOWRANK_INT4:
        meta = struct.pack("<I", p.rank)
        nib = _pack_nibbles(np.concatenate([p.u_factor.ravel(order="F"), p.w_factor.ravel(order="F")]))
        return head + meta + _f32le(p.u_range) + _f32le(p.w_range) + nib.tobytes()
    if p.tag == TAG_NMBLOCK:
        meta = struct.pack("<HH", p.n, p.m)
        return head + meta + p.masks.tobytes() + p.values.astype("<f2").tobytes()
    if p.tag == TAG_TOPK:
        meta = struct.pack("<I", p.kept)
        return head + meta + p.indices.astype("<u4").tobytes() + p.values.astype("<f2").tobytes()
    raise PayloadError(f"unknown tag {p.tag}")


def from_bytes(buf):
    """Parse a payload frame; raises PayloadError naming the codec."""
    if len(buf) < _HEADER.size:
        raise PayloadError("frame shorter than header")
    tag, rows, cols = _HEADER.unpack_from(buf, 0)
    body = memoryview(buf)[_HEADER.size:]
    try:
        if tag == TAG_RAW:
            data = _take_f32(body, rows * cols, "raw", exact=True)
            if not np.all(np.isfinite(data)):
                raise PayloadError("raw: non-finite entries")
            return RawPayload(rows, cols, data.reshape(rows, cols))
        if tag == TAG_SIGN1BIT:
            nb = -(-rows * cols // 8)
            bits = np.frombuffer(body[:nb], dtype=np.uint8)
            if bits.size != nb:
                raise PayloadError("sign1bit: truncated bitmap")
            u = _take_f32(body[nb:], rows, "sign1bit")
            v = _take_f32(body[nb + 4 * rows:], cols, "sign1bit", exact=True)
            _check_scales(u, v, "sign1bit")
            return SignPayload(rows, cols, bits.copy(), u, v)
        if tag == TAG_QUANT2BIT:
            nb = -(-2 * rows * cols // 8)
            codes = np.frombuffer(body[:nb], dtype=np.uint8)
            if codes.size != nb:
                raise PayloadError("quant2bit: truncated code map")
            u = _take_f32(body[nb:], rows, "quant2bit")
            v = _take_f32(body[nb + 4 * rows:], cols, "quant2bit", exact=True)
            _check_scales(u, v, "quant2bit")
            return Quant2Payload(rows, cols, codes.copy(), u, v)
        if tag in (TAG_LOWRANK, TAG_LOWRANK_INT4):
            if len(body) < 4:
                raise PayloadError("lowrank: missing rank")
            (r,) = struct.unpack_from("<I", body, 0)
            if not (1 <= r <= min(rows, cols)):
                raise PayloadError(f"lowrank: rank {r} out of range for {rows}x{cols}")
            rest = body[4:]
            if tag == TAG_LOWRANK:
                u = _take_f16_cm(rest, rows, r, "lowrank")
                w = _take_f16_cm(rest[2 * rows * r:], cols, r, "lowrank", exact=True)
                return LowRankPayload(rows, cols, r, False, u, w)
            ur = _take_f32(rest, r, "lowrank")
            wr = _take_f32(rest[4 * r:], r, "lowrank")
            if not (np.all(np.isfinite(ur)) and np.all(np.isfinite(wr))):
                raise PayloadError("lowrank: non-finite ranges")
            total = r * (rows + cols)
            nib = np.frombuffer(rest[8 * r:], dtype=np.uint8)
            if nib.size != -(-total // 2):
                raise PayloadError("lowrank: nibble stream length mismatch")
            codes = _unpack_nibbles(nib, total)
            uc = codes[: rows * r].reshape(rows, r, order="F")
            wc = codes[rows * r:].reshape(cols, r, order="F")
            return LowRankPayload(rows, cols, r, True, uc.copy(), wc.copy(), ur, wr)
        if tag == TAG_NMBLOCK:
            if len(body) < 4:
                raise PayloadError("nmblock: missing n:m meta")
            n, m = struct.unpack_from("<HH", body, 0)
            if not (1 <= n <= m):
                raise PayloadError("nmblock: bad n:m")
            rest = body[4:]
            blocks = rows * (-(-cols // m))
            mask_bytes = -(-blocks * m // 8)
            masks = np.frombuffer(rest[:mask_bytes], dtype=np.uint8)
            values = np.frombuffer(rest[mask_bytes:], dtype="<f2")
            if masks.size != mask_bytes or values.size != blocks * n:
                raise PayloadError("nmblock: truncated body")
            popcount = int(np.unpackbits(masks, count=blocks * m, bitorder="little").sum())
            if popcount != blocks * n:
                raise PayloadError("nmblock: mask popcount mismatch")
            return NMBlockPayload(rows, cols, n, m, masks.copy(), values.copy())
        if tag == TAG_TOPK:
            if len(body) < 4:
                raise PayloadError("topk: missing count")
            (k,) = struct.unpack_from("<I", body, 0)
            rest = body[4:]
            idx = np.frombuffer(rest[: 4 * k], dtype="<u4")
            values = np.frombuffer(rest[4 * k:], dtype="<f2")
            if idx.size != k or values.size != k:
                raise PayloadError("topk: truncated body")
            if k and int(idx.max()) >= rows * cols:
                raise PayloadError("topk: index out of range")
            return TopKPayload(rows, cols, idx.copy(), values.copy())
    except PayloadError:
        raise
    except Exception as exc:  # struct errors, bad buffer slices
        raise PayloadError(f"tag {tag}: {exc}") from exc
    raise PayloadError(f"unknown codec tag {tag}")


def _f32le(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _f16le_cm(a):
    return np.asarray(a, dtype="<f2").tobytes(order="F")


def _take_f32(view, count, codec, exact=False):
    arr = np.frombuffer(view[: 4 * count], dtype="<f4")
    if arr.size != count or (exact and len(view) != 4 * count):
        raise PayloadError(f"{codec}: body length mismatch")
    return arr.copy()


def _take_f16_cm(view, rows, cols, codec, exact=False):
    arr = np.frombuffer(view[: 2 * rows * cols], dtype="<f2")
    if arr.size != rows * cols or (exact and len(view) != 2 * rows * cols):
        raise PayloadError(f"{codec}: body length mismatch")
    return arr.reshape(rows, cols, order="F").copy()


def _check_scales(u, v, codec):
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise PayloadError(f"{codec}: non-finite scales")
    if np.any(u <= 0) or np.any(v < 0):
        raise PayloadError(f"{codec}: invalid scale signs")
