"""Simulated device mesh exchanging compressed row shards each step.

Every device owns a contiguous row shard of the activation tensor (the
last device takes the remainder) and keeps the full tensor reconstructed:
each step it encodes its own shard through the residual pipeline once,
ships the message to every peer (directly for the all-gather topology,
forwarded verbatim around the ring otherwise), decodes every incoming
stream through a per-(sender, receiver) pipeline state, and reassembles
the full tensor. Payloads are encoded once at origin and never
re-encoded in flight, so ring hops add no extra loss.

The byte ledger charges each transmission its payload content bytes
(ceil(nominal_bits / 8); raw/warmup transfers are charged at the 16-bit
activation baseline, see the compressors module) and records the round
structure for the latency model: messages inside one round transmit
concurrently on dedicated links, rounds serialize. Ring = P - 1 rounds
per step, all-gather = 1 round.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import compressors as cx
from . import linalg, pipeline as pl
from . import process as proc
from .transport import TransportError, make_transport

TOPOLOGIES = ("ring", "allgather")


class MeshError(RuntimeError):
    def __init__(self, msg, ledger=None):
        super().__init__(msg)
        self.ledger = ledger


@dataclass(frozen=True)
class Topology:
    kind: str
    devices: int

    def __post_init__(self):
        if self.kind not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if self.devices < 2:
            raise ValueError("mesh needs at least 2 devices")

    @property
    def rounds_per_step(self):
        return self.devices - 1 if self.kind == "ring" else 1


@dataclass(frozen=True)
class BandwidthModel:
    bytes_per_second: float
    base_latency_s: float = 0.0
    compute_time_s: float = 0.0
    overlap: bool = False

    def __post_init__(self):
        if self.bytes_per_second <= 0:
            raise ValueError("bandwidth must be positive")

    @staticmethod
    def from_dict(d):
        return BandwidthModel(
            bytes_per_second=float(d["bytes_per_second"]),
            base_latency_s=float(d.get("base_latency_s", 0.0)),
            compute_time_s=float(d.get("compute_time_s", 0.0)),
            overlap=bool(d.get("overlap", False)),
        )


@dataclass
class ByteLedger:
    """Exact per-device, per-step byte accounting plus the round schedule."""

    devices: int
    warmup_steps: int
    sent: list = field(default_factory=list)  # [step][device] payload bytes
    received: list = field(default_factory=list)
    baseline: list = field(default_factory=list)  # 16-bit uncompressed schedule
    rounds: list = field(default_factory=list)  # [step][round] -> [(src, dst, bytes)]
    valid: bool = True

    def add_step(self, round_msgs):
        sent = [0] * self.devices
        received = [0] * self.devices
        base = [0] * self.devices
        for rnd in round_msgs:
            for src, dst, nbytes, base_bytes in rnd:
                sent[src] += nbytes
                received[dst] += nbytes
                base[src] += base_bytes
        self.sent.append(sent)
        self.received.append(received)
        self.baseline.append(base)
        self.rounds.append([[(s, d, b) for s, d, b, _ in rnd] for rnd in round_msgs])

    @property
    def steps(self):
        return len(self.sent)

    def total_sent(self, include_warmup=True):
        lo = 0 if include_warmup else self.warmup_steps
        return sum(sum(row) for row in self.sent[lo:])

    def total_baseline(self, include_warmup=True):
        lo = 0 if include_warmup else self.warmup_steps
        return sum(sum(row) for row in self.baseline[lo:])

    def compression_ratio(self, include_warmup=True):
        sent = self.total_sent(include_warmup)
        return self.total_baseline(include_warmup) / sent if sent else float("inf")

    def conserved(self):
        return all(sum(s) == sum(r) for s, r in zip(self.sent, self.received))


def shard_bounds(rows, devices):
    """Contiguous row shards; the last device takes the remainder."""
    q = rows // devices
    if q == 0:
        raise ValueError(f"cannot shard {rows} rows across {devices} devices")
    bounds = []
    for d in range(devices):
        lo = d * q
        hi = rows if d == devices - 1 else (d + 1) * q
        bounds.append((lo, hi))
    return bounds


def ring_origin(device, rnd, devices):
    """Origin of the frame a ring device forwards in round rnd (1-based)."""
    return (device - rnd + 1) % devices


@dataclass
class DeviceResult:
    device: int
    records: list  # own-stream StepRecords
    total_errors: list  # ||full reconstruction - reference||^2 per step
    digests: list  # per-step digest of the full reconstruction
    final_base: np.ndarray


class _Device(threading.Thread):
    def __init__(self, idx, topo, traj, codec, mode, steps, warmup, transport, results, errors):
        super().__init__(daemon=True)
        self.idx = idx
        self.topo = topo
        self.traj = traj
        self.codec = codec
        self.mode = mode
        self.steps = steps
        self.warmup = warmup
        self.transport = transport
        self.results = results
        self.errors = errors
        self.step_rounds = []  # [(src, dst, bytes, baseline_bytes)] per round per step

    def run(self):
        try:
            self.results[self.idx] = self._run()
        except Exception as exc:  # propagate to the coordinator
            self.errors.append((self.idx, exc))

    def _run(self):
        P = self.topo.devices
        spec = self.traj.spec
        bounds = shard_bounds(spec.rows, P)
        lo, hi = bounds[self.idx]
        mode = self.mode
        full_base = self.traj.initial
        sender = pl.LayerState(mode, self.warmup, linalg.as_matrix(full_base[lo:hi]))
        inbox_states = {
            p: pl.LayerState(mode, self.warmup, linalg.as_matrix(full_base[bounds[p][0]:bounds[p][1]]))
            for p in range(P)
            if p != self.idx
        }
        records, totals, digests = [], [], []

        for t in range(1, self.steps + 1):
            if mode == pl.PipelineMode.RESIDUAL_NO_FEEDBACK and t > self.warmup:
                a_full = self.traj.states[t - 1]
            else:
                a_full = self.traj.step_map(t).apply(full_base)
            rng = linalg.spawn_rng(spec.seed, 6, self.idx, t)
            payload, rec = pl.encode_step(sender, linalg.as_matrix(a_full[lo:hi]), self.codec, rng)
            records.append(rec)
            my_frame = pl.message_for(t, self.warmup, payload)
            my_bytes = cx.nominal_wire_bytes(payload)
            my_base_bytes = 2 * (hi - lo) * spec.cols

            frames = {}
            rounds = []
            if self.topo.kind == "allgather":
                msgs = []
                for p in range(P):
                    if p == self.idx:
                        continue
                    self.transport.send(self.idx, p, my_frame)
                    msgs.append((self.idx, p, my_bytes, my_base_bytes))
                for p in range(P):
                    if p == self.idx:
                        continue
                    frames[p] = self.transport.recv(self.idx, p)
                rounds.append(msgs)
            else:  # ring
                nxt = (self.idx + 1) % P
                prv = (self.idx - 1) % P
                carried = my_frame
                carried_bytes = my_bytes
                carried_base = my_base_bytes
                for rnd in range(1, P):
                    self.transport.send(self.idx, nxt, carried)
                    rounds.append([(self.idx, nxt, carried_bytes, carried_base)])
                    got = self.transport.recv(self.idx, prv)
                    origin = ring_origin(self.idx, rnd, P)
                    frames[origin] = got
                    o_lo, o_hi = bounds[origin]
                    carried = got
                    carried_bytes = len_payload_bytes(got)
                    carried_base = 2 * (o_hi - o_lo) * spec.cols
            self.step_rounds.append(rounds)

            shards = [None] * P
            shards[self.idx] = sender.base
            for p, frame in frames.items():
                shards[p] = pl.decode_step(inbox_states[p], frame)
            full_base = linalg.freeze(np.vstack(shards))
            digests.append(hashlib.blake2b(full_base.tobytes(), digest_size=16).digest())
            totals.append(
                linalg.frob_norm_sq(
                    full_base.astype(np.float64) - self.traj.states[t - 1].astype(np.float64)
                )
            )
        return DeviceResult(self.idx, records, totals, digests, full_base)


def len_payload_bytes(frame):
    """Ledger bytes for a forwarded frame (content accounting, not framing)."""
    payload = pl.unpack_message(frame)[2]
    return cx.nominal_wire_bytes(payload)


def step_comm_seconds(rounds, model):
    """Rounds serialize; messages inside a round transmit concurrently."""
    total = 0.0
    for rnd in rounds:
        if rnd:
            total += max(b / model.bytes_per_second + model.base_latency_s for _s, _d, b in rnd)
    return total


def latency_estimate(ledger, model, compute_time_per_step=None):
    """steps x compute + communication under the round schedule."""
    compute = model.compute_time_s if compute_time_per_step is None else compute_time_per_step
    total = 0.0
    for rounds in ledger.rounds:
        comm = step_comm_seconds(rounds, model)
        if model.overlap:
            total += compute + comm - min(compute, comm)
        else:
            total += compute + comm
    return total


def run_mesh(topology, process_spec, codec, mode, steps, warmup, bandwidth_model, transport_kind, port_base=38200):
    """Execute the mesh; returns (ByteLedger, [DeviceResult], latency seconds).

    All devices must hold bit-identical full reconstructions after every
    step; the run aborts with a flagged ledger on transport failure.
    """
    topo = topology
    if not isinstance(topo, Topology):
        raise ValueError("topology must be a Topology")
    mode = pl.PipelineMode(mode)
    if steps <= warmup:
        raise ValueError("need steps > warmup")
    spec = process_spec
    if spec.steps < steps:
        raise ValueError(f"process provides {spec.steps} steps, mesh needs {steps}")
    traj = proc.make_process(spec)
    transport = make_transport(transport_kind, topo.devices, port_base)
    results = [None] * topo.devices
    errors = []
    devices = [
        _Device(d, topo, traj, codec, mode, steps, warmup, transport, results, errors)
        for d in range(topo.devices)
    ]
    try:
        for dev in devices:
            dev.start()
        for dev in devices:
            dev.join(timeout=120.0)
    finally:
        transport.close()

    ledger = ByteLedger(topo.devices, warmup)
    if errors or any(r is None for r in results):
        ledger.valid = False
        detail = "; ".join(f"device {i}: {e}" for i, e in errors) or "device hang"
        raise MeshError(f"mesh run aborted: {detail}", ledger)

    for t in range(steps):
        merged = []
        for rnd in range(topo.rounds_per_step):
            msgs = []
            for dev in devices:
                msgs.extend(dev.step_rounds[t][rnd])
            merged.append(msgs)
        ledger.add_step(merged)

    for t in range(steps):
        step_digests = {r.digests[t] for r in results}
        if len(step_digests) != 1:
            ledger.valid = False
            raise MeshError(f"devices diverged: reconstructions differ at step {t + 1}", ledger)
    if not ledger.conserved():
        ledger.valid = False
        raise MeshError("byte conservation violated", ledger)

    latency = latency_estimate(ledger, bandwidth_model)
    return ledger, results, latency
