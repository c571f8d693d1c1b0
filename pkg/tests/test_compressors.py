import numpy as np
import pytest

from compactcomm import compressors as cx
from compactcomm import linalg

from oracles import best_subset_energy, svd_optimal_rank_error


def mat(data):
    return linalg.as_matrix(np.array(data, dtype=np.float32))


def rel_err(a, b):
    return np.sqrt(linalg.frob_norm_sq(a.astype(np.float64) - b.astype(np.float64)) / linalg.frob_norm_sq(a))


# -- scale estimation -------------------------------------------------------


def test_scale_estimate_hand_values():
    sp = cx.scale_estimate(mat([[1, -1], [2, -2]]))
    assert np.allclose(sp.u, [2 / 3, 4 / 3], atol=1e-7)
    assert np.allclose(sp.v, [1.5, 1.5], atol=1e-7)
    assert np.allclose(sp.outer(), [[1, 1], [2, 2]], atol=1e-6)


def test_scale_estimate_all_zero():
    sp = cx.scale_estimate(mat(np.zeros((3, 4))))
    assert np.array_equal(sp.u, np.ones(3, dtype=np.float32))
    assert np.array_equal(sp.v, np.zeros(4, dtype=np.float32))


def test_scale_estimate_constant_magnitude():
    x = mat([[3, -3, 3], [-3, 3, -3]])
    sp = cx.scale_estimate(x)
    assert np.allclose(sp.outer(), 3.0, atol=1e-6)


def test_scale_estimate_zero_row_keeps_u_positive():
    sp = cx.scale_estimate(mat([[0, 0], [2, 2]]))
    assert np.all(sp.u > 0)


# -- sign 1-bit --------------------------------------------------------------


def test_sign1bit_exact_on_rank1_magnitude():
    x = mat([[1, -1], [2, -2]])
    p = cx.encode_sign1bit(x)
    assert np.allclose(cx.decode(p), x, atol=1e-6)
    assert cx.empirical_delta(x, p) == pytest.approx(1.0, abs=1e-9)


def test_sign1bit_zero_input():
    x = mat(np.zeros((2, 2)))
    assert np.array_equal(cx.decode(cx.encode_sign1bit(x)), np.zeros((2, 2), dtype=np.float32))


def test_sign1bit_sign_of_zero_is_positive():
    x = mat([[0.0, 1.0], [-1.0, 0.0]])
    p = cx.encode_sign1bit(x)
    bits = np.unpackbits(p.neg_bits, count=4, bitorder="little")
    assert bits.tolist() == [0, 0, 1, 0]


def test_sign1bit_payload_only_ratio_is_16():
    p = cx.encode_sign1bit(linalg.gaussian_matrix(linalg.make_rng(0), 32, 48))
    assert cx.payload_only_ratio(p) == 16.0
    assert p.bit_size == 32 * 48 + 32 * (32 + 48)


# -- quant 2-bit --------------------------------------------------------------


def test_quant2bit_tie_breaks_to_small_level():
    # all-equal positive entries: normalized value 1 ties between +0.5 and +2
    x = mat(np.full((3, 3), 7.0))
    p = cx.encode_quant2bit(x)
    codes = cx._unpack_crumbs(p.codes, 9)
    assert np.all(codes == 2)  # +0.5
    assert np.allclose(cx.decode(p), 3.5, atol=1e-6)


def test_quant2bit_zero_input():
    x = mat(np.zeros((4, 4)))
    assert np.array_equal(cx.decode(cx.encode_quant2bit(x)), np.zeros((4, 4), dtype=np.float32))


def test_quant2bit_payload_only_ratio_is_8():
    p = cx.encode_quant2bit(linalg.gaussian_matrix(linalg.make_rng(1), 32, 48))
    assert cx.payload_only_ratio(p) == 8.0
    assert p.bit_size == 2 * 32 * 48 + 32 * (32 + 48)


def test_quant_energy_bound_property():
    # delta-hat > 0 on at least 99% of 1000 Gaussian trials, both quantizers
    rng = linalg.make_rng(77)
    wins = {"sign": 0, "q2": 0}
    trials = 1000
    for _ in range(trials):
        x = linalg.gaussian_matrix(rng, 12, 12)
        if cx.empirical_delta(x, cx.encode_sign1bit(x)) > 0:
            wins["sign"] += 1
        if cx.empirical_delta(x, cx.encode_quant2bit(x)) > 0:
            wins["q2"] += 1
    assert wins["sign"] >= 0.99 * trials
    assert wins["q2"] >= 0.99 * trials


# -- low rank -----------------------------------------------------------------


def test_subspace_iteration_exact_rank_recovery():
    rng = linalg.make_rng(3)
    a = linalg.matmul(linalg.gaussian_matrix(rng, 40, 6), linalg.gaussian_matrix(rng, 6, 32))
    u, _ = cx.subspace_iteration(a, 6, 2, rng)
    w = linalg.matmul(a.T, u)
    approx = linalg.matmul(u, w.T)
    assert rel_err(a, approx) < 1e-3


def test_subspace_iteration_near_optimal_vs_svd_oracle():
    rng = linalg.make_rng(5)
    for r in (4, 8, 16):
        a = linalg.gaussian_matrix(rng, 64, 64)
        u, _ = cx.subspace_iteration(a, r, 2, rng)
        w = linalg.matmul(a.T, u)
        err = np.sqrt(linalg.frob_norm_sq(a - linalg.matmul(u, w.T)))
        optimal = svd_optimal_rank_error(a, r)
        assert err <= 1.10 * optimal


def test_subspace_iteration_error_non_increasing_in_t():
    a = linalg.gaussian_matrix(linalg.make_rng(8), 64, 64)

    def err(t):
        u, _ = cx.subspace_iteration(a, 8, t, linalg.make_rng(99))
        return np.sqrt(linalg.frob_norm_sq(a - linalg.matmul(u, linalg.matmul(a.T, u).T)))

    assert err(10) <= err(2) * 1.001


def test_subspace_iteration_rank_deficient_input():
    rng = linalg.make_rng(13)
    a = linalg.matmul(linalg.gaussian_matrix(rng, 24, 2), linalg.gaussian_matrix(rng, 2, 24))
    u, _ = cx.subspace_iteration(a, 5, 2, rng)  # rank 2 < r: replacement path
    w = linalg.matmul(a.T, u)
    assert rel_err(a, linalg.matmul(u, w.T)) < 1e-3


def test_lowrank_rank1_near_exact():
    u = np.array([[1.0], [2.0], [3.0]], dtype=np.float32)
    v = np.array([[4.0, 5.0, 6.0, 7.0]], dtype=np.float32)
    a = linalg.matmul(linalg.as_matrix(u), linalg.as_matrix(v))
    spec = cx.CompressorSpec(cx.CompressorKind.LOWRANK, rank=1, iterations=2)
    p = cx.encode_lowrank(a, spec, linalg.make_rng(2))
    assert rel_err(a, cx.decode(p)) < 5e-3


def test_lowrank_bit_budget_match():
    # rank-32 INT4 factors cost the same data bits as rank-8 16-bit factors
    rng = linalg.make_rng(4)
    a = linalg.gaussian_matrix(rng, 64, 96)
    p32 = cx.encode_lowrank(a, cx.CompressorSpec(cx.CompressorKind.LOWRANK, rank=32, iterations=2, int4_factors=True), rng)
    p8 = cx.encode_lowrank(a, cx.CompressorSpec(cx.CompressorKind.LOWRANK, rank=8, iterations=2), rng)
    assert p32.payload_only_bits == p8.payload_only_bits == 128 * (64 + 96)
    assert p32.bit_size == 4 * 32 * (64 + 96) + 32 * 2 * 32
    assert p8.bit_size == 16 * 8 * (64 + 96)


def test_lowrank_int4_beats_rank8_at_equal_bits_on_highrank_input():
    rng = linalg.make_rng(6)
    a = linalg.gaussian_matrix(rng, 128, 512)
    e32 = rel_err(a, cx.decode(cx.encode_lowrank(a, cx.CompressorSpec(cx.CompressorKind.LOWRANK, rank=32, iterations=2, int4_factors=True), linalg.make_rng(7))))
    e8 = rel_err(a, cx.decode(cx.encode_lowrank(a, cx.CompressorSpec(cx.CompressorKind.LOWRANK, rank=8, iterations=2), linalg.make_rng(7))))
    assert e32 < e8


# -- N:M block sparsifier ------------------------------------------------------


def test_nm_block_hand_example():
    p = cx.encode_nm_block(mat([[1.0, -5.0, 2.0, 0.0]]), 2, 4)
    mask = np.unpackbits(p.masks, count=4, bitorder="little")
    assert mask.tolist() == [0, 1, 1, 0]
    assert np.allclose(cx.decode(p), [[0.0, -5.0, 2.0, 0.0]], atol=1e-6)


def test_nm_block_all_zero_block_keeps_first_n():
    p = cx.encode_nm_block(mat([[0.0, 0.0, 0.0, 0.0]]), 2, 4)
    mask = np.unpackbits(p.masks, count=4, bitorder="little")
    assert mask.tolist() == [1, 1, 0, 0]
    assert np.array_equal(cx.decode(p), np.zeros((1, 4), dtype=np.float32))


def test_nm_block_n_equals_m_lossless_to_f16():
    x = linalg.gaussian_matrix(linalg.make_rng(10), 8, 16)
    p = cx.encode_nm_block(x, 4, 4)
    assert np.array_equal(cx.decode(p), x.astype(np.float16).astype(np.float32))


def test_nm_block_padding_roundtrip():
    x = linalg.gaussian_matrix(linalg.make_rng(11), 3, 10)  # 10 % 4 != 0
    p = cx.encode_nm_block(x, 2, 4)
    out = cx.decode(p)
    assert out.shape == (3, 10)


def test_nm_block_energy_dominance_vs_bruteforce():
    rng = linalg.make_rng(12)
    for n, m in ((1, 4), (2, 4), (2, 6), (3, 8)):
        x = linalg.gaussian_matrix(rng, 4, m * 3)
        p = cx.encode_nm_block(x, n, m)
        mask = np.unpackbits(p.masks, count=p.block_count * m, bitorder="little").astype(bool)
        blocks = np.asarray(x, dtype=np.float64).reshape(-1, m)
        kept = np.where(mask.reshape(-1, m), blocks, 0.0)
        for b in range(blocks.shape[0]):
            assert np.sum(kept[b] ** 2) >= best_subset_energy(blocks[b], n) - 1e-9


# -- top-k ---------------------------------------------------------------------


def test_topk_full_fraction_lossless_to_f16():
    x = linalg.gaussian_matrix(linalg.make_rng(14), 6, 7)
    p = cx.encode_topk(x, 1.0)
    assert np.array_equal(cx.decode(p), x.astype(np.float16).astype(np.float32))


def test_topk_hand_example():
    p = cx.encode_topk(mat([[3.0, 1.0], [-4.0, 0.0]]), 0.5)
    assert np.allclose(cx.decode(p), [[3.0, 0.0], [-4.0, 0.0]], atol=1e-6)


def test_topk_delta_exceeds_fraction_on_gaussian():
    rng = linalg.make_rng(15)
    for frac in (0.1, 0.25, 0.5):
        x = linalg.gaussian_matrix(rng, 32, 32)
        assert cx.empirical_delta(x, cx.encode_topk(x, frac)) >= frac


# -- shared payload behaviour ---------------------------------------------------


def all_specs():
    return [
        cx.CompressorSpec(cx.CompressorKind.IDENTITY),
        cx.CompressorSpec(cx.CompressorKind.SIGN1BIT),
        cx.CompressorSpec(cx.CompressorKind.QUANT2BIT),
        cx.CompressorSpec(cx.CompressorKind.LOWRANK, rank=3, iterations=2),
        cx.CompressorSpec(cx.CompressorKind.LOWRANK, rank=3, iterations=2, int4_factors=True),
        cx.CompressorSpec(cx.CompressorKind.NM_BLOCK, n=2, m=4),
        cx.CompressorSpec(cx.CompressorKind.TOPK, keep_fraction=0.3),
    ]


META_BYTES = {0: 0, 1: 0, 2: 0, 3: 4, 4: 4, 5: 4, 6: 4}


@pytest.mark.parametrize("spec", all_specs(), ids=lambda s: s.label())
def test_roundtrip_and_bit_size_exactness(spec):
    for shape in ((3, 5), (8, 8), (5, 12)):
        x = linalg.gaussian_matrix(linalg.make_rng(16), *shape)
        p = cx.encode(x, spec, rng=linalg.make_rng(17))
        blob = cx.to_bytes(p)
        assert blob[:1] == bytes([p.tag])
        assert int.from_bytes(blob[1:5], "little") == shape[0]
        assert int.from_bytes(blob[5:9], "little") == shape[1]
        body_len = len(blob) - 9 - META_BYTES[p.tag]
        assert body_len == -(-p.bit_size // 8)
        q = cx.from_bytes(blob)
        assert np.array_equal(cx.decode(p), cx.decode(q))
        assert cx.to_bytes(q) == blob


@pytest.mark.parametrize("spec", all_specs(), ids=lambda s: s.label())
def test_encode_determinism(spec):
    x = linalg.gaussian_matrix(linalg.make_rng(18), 6, 9)
    p1 = cx.encode(x, spec, rng=linalg.make_rng(19))
    p2 = cx.encode(x, spec, rng=linalg.make_rng(19))
    assert cx.to_bytes(p1) == cx.to_bytes(p2)
    assert np.array_equal(cx.decode(p1), cx.decode(p2))


def test_identity_ratio_is_one():
    p = cx.encode_raw(linalg.gaussian_matrix(linalg.make_rng(20), 16, 16))
    assert cx.payload_only_ratio(p) == 1.0
    assert cx.overhead_ratio(p) == 1.0
    assert p.bit_size == 32 * 256  # wire carries exact float32


def test_empirical_delta_zero_decode():
    x = mat([[1.0, 2.0], [3.0, 4.0]])
    zero = cx.RawPayload(2, 2, np.zeros((2, 2), dtype=np.float32))
    assert cx.empirical_delta(x, zero) == pytest.approx(0.0, abs=1e-12)


def test_empirical_delta_zero_input_sentinel():
    z = mat(np.zeros((2, 2)))
    assert cx.empirical_delta(z, cx.encode_raw(z)) == 1.0
    bad = cx.RawPayload(2, 2, np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        cx.empirical_delta(z, bad)


def test_corrupted_payloads_raise():
    x = linalg.gaussian_matrix(linalg.make_rng(21), 4, 6)
    blob = cx.to_bytes(cx.encode_sign1bit(x))
    with pytest.raises(cx.PayloadError):
        cx.from_bytes(blob[:-3])
    with pytest.raises(cx.PayloadError):
        cx.from_bytes(b"\xff" + blob[1:])
    with pytest.raises(cx.PayloadError):
        cx.from_bytes(blob[:4])


def test_lowrank_rejects_bad_rank():
    x = linalg.gaussian_matrix(linalg.make_rng(22), 4, 4)
    with pytest.raises(linalg.ShapeError):
        cx.subspace_iteration(x, 5, 2, linalg.make_rng(23))
