import numpy as np
import pytest

from compactcomm import compressors as cx
from compactcomm import linalg, pipeline as pl, process
from compactcomm.pipeline import LayerState, PipelineMode, ProtocolError
from compactcomm.process import ProcessSpec

SIGN = cx.CompressorSpec(cx.CompressorKind.SIGN1BIT)
IDENT = cx.CompressorSpec(cx.CompressorKind.IDENTITY)


@pytest.fixture(scope="module")
def walk_traj():
    return process.make_process(ProcessSpec(16, 16, 0.5, 100.0, 1.0, 40, seed=3, drift="walk"))


def make_state(mode, base, warmup=1):
    return LayerState(PipelineMode(mode), warmup, base)


def test_warmup_transmits_exactly():
    rng = linalg.make_rng(1)
    a = linalg.gaussian_matrix(rng, 4, 4)
    st = make_state("naive", linalg.freeze(np.zeros((4, 4), dtype=np.float32)), warmup=2)
    payload, rec = pl.encode_step(st, a, SIGN)
    assert payload.tag == cx.TAG_RAW
    assert np.array_equal(st.base, a)
    assert rec.compression_error == 0.0
    assert rec.delta_hat == 1.0


def test_identity_codec_collapses_all_modes(walk_traj):
    results = {}
    for mode in PipelineMode:
        recs = pl.run_trajectory(walk_traj, IDENT, mode, warmup=1)
        assert all(r.total_error == 0.0 for r in recs)
        results[mode] = [r.compression_error for r in recs]
    for mode, errs in results.items():
        assert all(e == 0.0 for e in errs)


def test_feedback_zero_outside_feedback_mode(walk_traj):
    for mode in (PipelineMode.NAIVE, PipelineMode.RESIDUAL_NO_FEEDBACK):
        st = make_state(mode, walk_traj.initial)
        for t in (1, 2, 3):
            a = walk_traj.states[t - 1]
            pl.encode_step(st, a, SIGN)
            assert np.all(st.feedback == 0.0)


def test_feedback_conservation_exact(walk_traj):
    st = make_state(PipelineMode.RESIDUAL_WITH_FEEDBACK, walk_traj.initial)
    for t in range(1, 11):
        a_star = walk_traj.step_map(t).apply(st.base)
        base_before = st.base
        fb_before = st.feedback
        payload, _ = pl.encode_step(st, a_star, SIGN)
        if t > st.warmup_steps:
            target = (a_star - base_before) + fb_before
            decoded = cx.decode(payload)
            assert np.array_equal(st.feedback, target - decoded)


def test_sender_receiver_base_bit_identical(walk_traj):
    for mode in PipelineMode:
        for codec in (SIGN, cx.CompressorSpec(cx.CompressorKind.QUANT2BIT),
                      cx.CompressorSpec(cx.CompressorKind.LOWRANK, rank=4, iterations=2, int4_factors=True)):
            pl.run_trajectory(walk_traj, codec, mode, steps=10, warmup=1)  # raises on divergence


def test_constant_input_with_feedback_stays_exact():
    a = linalg.gaussian_matrix(linalg.make_rng(5), 6, 6)
    st = make_state(PipelineMode.RESIDUAL_WITH_FEEDBACK, linalg.freeze(np.zeros_like(a)))
    errs = []
    for t in range(1, 12):
        pl.encode_step(st, a, SIGN)
        errs.append(linalg.frob_norm_sq(st.base - a))
    assert errs[0] == 0.0  # warmup exactness
    for prev, cur in zip(errs, errs[1:]):
        assert cur <= prev + 1e-12


def test_step_counter_desync_detected(walk_traj):
    sender = make_state("naive", walk_traj.initial)
    receiver = make_state("naive", walk_traj.initial)
    p1, _ = pl.encode_step(sender, walk_traj.states[0], SIGN)
    msg1 = pl.message_for(1, 1, p1)
    pl.decode_step(receiver, msg1)
    p2, _ = pl.encode_step(sender, walk_traj.states[1], SIGN)
    msg2 = pl.message_for(2, 1, p2)
    with pytest.raises(ProtocolError):
        pl.decode_step(receiver, msg1)  # replay
    base_before = receiver.base
    with pytest.raises(ProtocolError):
        pl.decode_step(receiver, pl.message_for(3, 1, p2))  # skip
    assert np.array_equal(receiver.base, base_before)
    pl.decode_step(receiver, msg2)
    assert np.array_equal(receiver.base, sender.base)


def test_corrupted_message_leaves_state_unchanged(walk_traj):
    sender = make_state("naive", walk_traj.initial)
    receiver = make_state("naive", walk_traj.initial)
    p, _ = pl.encode_step(sender, walk_traj.states[0], SIGN)
    msg = bytearray(pl.message_for(1, 1, p))
    msg = msg[:-4]  # truncate
    step_before = receiver.step
    with pytest.raises(cx.PayloadError):
        pl.decode_step(receiver, bytes(msg))
    assert receiver.step == step_before


def test_total_error_zero_through_warmup(walk_traj):
    recs = pl.run_trajectory(walk_traj, SIGN, PipelineMode.RESIDUAL_WITH_FEEDBACK, warmup=3)
    for r in recs[:3]:
        assert r.total_error == 0.0
    assert recs[3].total_error >= 0.0


def test_run_trajectory_rejects_bad_lengths(walk_traj):
    with pytest.raises(ValueError):
        pl.run_trajectory(walk_traj, SIGN, "naive", steps=2, warmup=2)
    with pytest.raises(ValueError):
        pl.run_trajectory(walk_traj, SIGN, "naive", steps=999)


def test_feedback_mode_beats_naive_on_slow_stream(walk_traj):
    naive = pl.run_trajectory(walk_traj, SIGN, PipelineMode.NAIVE, warmup=1)
    fb = pl.run_trajectory(walk_traj, SIGN, PipelineMode.RESIDUAL_WITH_FEEDBACK, warmup=1)
    m_naive = np.mean([r.compression_error for r in naive[1:]])
    m_fb = np.mean([r.compression_error for r in fb[1:]])
    assert m_fb * 10.0 <= m_naive  # compressing residuals wins by >= 10x


def test_no_feedback_error_grows_with_steps(walk_traj):
    recs = pl.run_trajectory(walk_traj, SIGN, PipelineMode.RESIDUAL_NO_FEEDBACK, warmup=1)
    te = np.array([r.total_error for r in recs])
    assert te[-5:].mean() > te[5:10].mean()


def test_trajectory_csv_rows_schema(walk_traj):
    recs = pl.run_trajectory(walk_traj, SIGN, "naive", steps=5, warmup=1)
    rows = pl.trajectory_csv_rows(recs, "naive", SIGN.label())
    assert list(rows[0].keys()) == [
        "step", "mode", "codec", "compression_error", "total_error", "bits", "delta_hat",
    ]
    assert rows[0]["bits"] > 0
