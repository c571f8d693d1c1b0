"""Stateful step-wise encode/decode protocol over a shared base tensor.

Three modes:

  naive                  compress the full input every step.
  residual_no_feedback   compress the difference between the current and
                         the previous *input* (open loop). The receiver
                         accumulates decoded differences; nothing corrects
                         drift, so the total error random-walks upward.
  residual_with_feedback compress (input - shared base) + stored feedback;
                         the feedback buffer keeps exactly the part of the
                         target the codec dropped and re-enters the next
                         target, so drift is continuously repaid.

The first `warmup_steps` transmissions carry the raw tensor and initialize
the base on both sides. Sender and receiver advance the base by applying
the same decode to the same payload, so their copies stay bit-identical;
every message carries a step counter so desynchronization is detected
instead of silently corrupting state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import compressors as cx
from . import linalg

_ENVELOPE = struct.Struct("<IB")


class ProtocolError(RuntimeError):
    pass


class PipelineMode(str, Enum):
    NAIVE = "naive"
    RESIDUAL_NO_FEEDBACK = "residual_no_feedback"
    RESIDUAL_WITH_FEEDBACK = "residual_with_feedback"


@dataclass
class StepRecord:
    step: int
    compression_error: float  # ||decode - target||^2
    bits: int  # ledger bits for the transmission
    delta_hat: float
    total_error: float = float("nan")  # filled by trajectory/mesh drivers


@dataclass
class LayerState:
    """Per-(layer, peer) pipeline state; single-owner, advanced step by step."""

    mode: PipelineMode
    warmup_steps: int
    base: np.ndarray
    feedback: np.ndarray = None
    ref: np.ndarray = None  # previous input, the no-feedback residual reference
    step: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        zero = linalg.freeze(np.zeros_like(self.base))
        if self.feedback is None:
            self.feedback = zero
        if self.ref is None:
            self.ref = self.base


def _step_delta(target, decoded):
    err = linalg.frob_norm_sq(decoded.astype(np.float64) - target.astype(np.float64))
    total = linalg.frob_norm_sq(target)
    if total == 0.0:
        return 1.0 if err == 0.0 else -float("inf")
    return 1.0 - err / total


def encode_step(state, a_star, codec, rng=None):
    """Advance the sender one step; returns (payload, StepRecord)."""
    if a_star.shape != state.base.shape:
        raise linalg.ShapeError(f"input shape {a_star.shape} != state shape {state.base.shape}")
    t = state.step + 1
    if t <= state.warmup_steps or codec.kind == cx.CompressorKind.IDENTITY:
        # warmup and the identity codec both transmit the raw tensor; raw
        # payloads replace the base outright, which keeps the lossless
        # collapse of all modes exact even in float32 arithmetic
        payload = cx.encode_raw(a_star)
        decoded = payload.decode()
        target = a_star
        state.base = decoded
        state.feedback = linalg.freeze(np.zeros_like(a_star))
    else:
        if state.mode == PipelineMode.NAIVE:
            target = a_star
        elif state.mode == PipelineMode.RESIDUAL_NO_FEEDBACK:
            target = linalg.freeze(a_star - state.ref)
        else:
            target = linalg.freeze((a_star - state.base) + state.feedback)
        payload = cx.encode(target, codec, rng)
        decoded = payload.decode()
        if state.mode == PipelineMode.RESIDUAL_WITH_FEEDBACK:
            state.feedback = linalg.freeze(target - decoded)
        if state.mode == PipelineMode.NAIVE:
            state.base = decoded
        else:
            state.base = linalg.freeze(state.base + decoded)
    state.ref = a_star
    state.step = t
    record = StepRecord(
        step=t,
        compression_error=linalg.frob_norm_sq(decoded.astype(np.float64) - target.astype(np.float64)),
        bits=payload.nominal_bits,
        delta_hat=_step_delta(target, decoded),
    )
    return payload, record


def pack_message(step, payload):
    """Envelope + codec frame: [step u32][warmup flag u8][frame]."""
    return _ENVELOPE.pack(step, 0) + cx.to_bytes(payload)


def pack_warmup_message(step, payload):
    return _ENVELOPE.pack(step, 1) + cx.to_bytes(payload)


def unpack_message(buf):
    if len(buf) < _ENVELOPE.size:
        raise cx.PayloadError("message shorter than envelope")
    step, warm = _ENVELOPE.unpack_from(buf, 0)
    return step, bool(warm), cx.from_bytes(bytes(buf[_ENVELOPE.size:]))


def message_for(state_step, warmup_steps, payload):
    if state_step <= warmup_steps:
        return pack_warmup_message(state_step, payload)
    return pack_message(state_step, payload)


def decode_step(state, message):
    """Advance the receiver one step; returns the new reconstruction.

    The state is untouched unless the message parses, matches the expected
    step counter, and decodes cleanly.
    """
    step, is_warmup, payload = unpack_message(message)
    if step != state.step + 1:
        raise ProtocolError(f"step desynchronization: got {step}, expected {state.step + 1}")
    if (step <= state.warmup_steps) != is_warmup:
        raise ProtocolError(f"warmup flag mismatch at step {step}")
    if (payload.rows, payload.cols) != state.base.shape:
        raise ProtocolError(f"payload shape {(payload.rows, payload.cols)} != state shape {state.base.shape}")
    decoded = payload.decode()
    if is_warmup or payload.tag == cx.TAG_RAW or state.mode == PipelineMode.NAIVE:
        state.base = decoded
    else:
        state.base = linalg.freeze(state.base + decoded)
    state.step = step
    return state.base


def run_trajectory(traj, codec, mode, steps=None, warmup=1, encode_key=5):
    """Drive one layer through the pipeline against a reference trajectory.

    Closed-loop modes evaluate each step map on the shared reconstruction
    (a*_t = f_t(base)); the open-loop no-feedback mode consumes the
    uncompressed reference states directly. Returns the StepRecords with
    total_error = ||reconstruction - reference||^2 filled in.
    """
    mode = PipelineMode(mode)
    steps = len(traj.states) if steps is None else steps
    if steps > len(traj.states):
        raise ValueError(f"trajectory has only {len(traj.states)} steps")
    if steps <= warmup:
        raise ValueError("need steps > warmup")
    sender = LayerState(mode, warmup, traj.initial)
    receiver = LayerState(mode, warmup, traj.initial)
    records = []
    for t in range(1, steps + 1):
        if mode == PipelineMode.RESIDUAL_NO_FEEDBACK:
            a_star = traj.states[t - 1]
        else:
            a_star = traj.step_map(t).apply(sender.base)
        rng = linalg.spawn_rng(traj.spec.seed, encode_key, t)
        payload, rec = encode_step(sender, a_star, codec, rng)
        recon = decode_step(receiver, message_for(t, warmup, payload))
        if not np.array_equal(recon, sender.base):
            raise ProtocolError(f"sender/receiver base diverged at step {t}")
        rec.total_error = linalg.frob_norm_sq(
            recon.astype(np.float64) - traj.states[t - 1].astype(np.float64)
        )
        records.append(rec)
    return records


def trajectory_csv_rows(records, mode, codec_label):
    """Rows for the step,mode,codec,compression_error,total_error,bits,delta_hat schema."""
    out = []
    for r in records:
        out.append(
            {
                "step": r.step,
                "mode": PipelineMode(mode).value,
                "codec": codec_label,
                "compression_error": r.compression_error,
                "total_error": r.total_error,
                "bits": r.bits,
                "delta_hat": r.delta_hat,
            }
        )
    return out
