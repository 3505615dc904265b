"""Simulated data-parallel world: topology, collectives and traffic accounting.

Nothing here moves bytes over a network. Collectives compute their result
directly (ascending-rank summation, so every participant receives the very
same bits) and a :class:`TrafficLedger` records what a ring implementation
would have put on the wire.
"""

from __future__ import annotations

import csv
import io
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ProtocolError

GLOBAL = "global"
BACKWARD_FRACTION = 0.5384
LEDGER_COLUMNS = ("step", "phase", "scope", "elements", "bytes")


def group_scope(group: int) -> str:
    return f"group{group}"


def ring_factor(participants: int) -> Fraction:
    """Per-rank payload multiplier of a ring all-reduce: ``2 (q - 1) / q``."""
    if participants < 1:
        raise ValueError("participants must be >= 1")
    return Fraction(2 * (participants - 1), participants)


def broadcast_factor(participants: int) -> Fraction:
    """Per-rank payload multiplier of a pipelined ring broadcast."""
    return Fraction(participants - 1, participants)


@dataclass(frozen=True)
class WorldTopology:
    """``world_size`` ranks split into ``num_groups`` contiguous equal blocks.

    The first half of the groups are A-groups, the rest B-groups. With a
    single group every rank trains ``B``.
    """

    world_size: int
    num_groups: int

    @property
    def ranks_per_group(self) -> int:
        return self.world_size // self.num_groups

    def group_of(self, rank: int) -> int:
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside world of size {self.world_size}")
        return rank // self.ranks_per_group

    def role_of(self, group: int) -> str:
        if self.num_groups == 1:
            return "B"
        return "A" if group < self.num_groups // 2 else "B"

    def role_of_rank(self, rank: int) -> str:
        return self.role_of(self.group_of(rank))

    def group_ranks(self, group: int) -> list[int]:
        start = group * self.ranks_per_group
        return list(range(start, start + self.ranks_per_group))

    def participants(self, scope: str) -> list[int]:
        if scope == GLOBAL:
            return list(range(self.world_size))
        if scope.startswith("group"):
            return self.group_ranks(int(scope[5:]))
        raise ValueError(f"unknown scope {scope!r}")


def make_topology(world_size: int, num_groups: int) -> WorldTopology:
    if world_size < 1:
        raise ConfigError("world_size must be >= 1")
    if num_groups < 1 or world_size % num_groups:
        raise ConfigError(f"num_groups={num_groups} must divide world_size={world_size}")
    if num_groups > 1 and num_groups % 2:
        raise ConfigError(f"num_groups={num_groups} must be even to split into A and B groups")
    return WorldTopology(world_size, num_groups)


@dataclass(frozen=True)
class LedgerEntry:
    step: int
    phase: str
    scope: str
    elements: int
    bytes: Fraction
    participants: int


@dataclass
class LedgerTotals:
    total_bytes: Fraction
    per_phase: dict[str, Fraction]
    per_step: dict[int, Fraction]
    job_bytes: Fraction
    backward_fraction: float = BACKWARD_FRACTION

    @property
    def scaled_traffic(self) -> float:
        return float(self.total_bytes) * self.backward_fraction


def _fmt_bytes(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return repr(float(value))


@dataclass
class TrafficLedger:
    """Append-only record of collective traffic.

    ``bytes`` of an entry is what each participating rank sends:
    ``elements * bytes_per_element * factor(participants)``, kept as an exact
    fraction. ``job_bytes`` in the totals multiplies each entry by its
    participant count, i.e. traffic summed over every rank in the job.
    """

    bytes_per_element: int = 8
    factor: Callable[[int], Fraction] = ring_factor
    entries: list[LedgerEntry] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, step: int, phase: str, scope: str, elements: int, participants: int,
               factor: Callable[[int], Fraction] | None = None) -> LedgerEntry:
        factor = self.factor if factor is None else factor
        nbytes = Fraction(elements * self.bytes_per_element) * factor(participants)
        entry = LedgerEntry(step, phase, scope, int(elements), nbytes, participants)
        with self._lock:
            self.entries.append(entry)
        return entry

    def totals(self, filter: Callable[[LedgerEntry], bool] | None = None,
               backward_fraction: float = BACKWARD_FRACTION) -> LedgerTotals:
        per_phase: dict[str, Fraction] = defaultdict(Fraction)
        per_step: dict[int, Fraction] = defaultdict(Fraction)
        total = Fraction(0)
        job = Fraction(0)
        for e in self.entries:
            if filter is not None and not filter(e):
                continue
            total += e.bytes
            job += e.bytes * e.participants
            per_phase[e.phase] += e.bytes
            per_step[e.step] += e.bytes
        return LedgerTotals(total, dict(per_phase), dict(per_step), job, backward_fraction)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LEDGER_COLUMNS)
        for e in self.entries:
            writer.writerow([e.step, e.phase, e.scope, e.elements, _fmt_bytes(e.bytes)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def ledger_totals(ledger: TrafficLedger, filter=None, backward_fraction: float = BACKWARD_FRACTION) -> LedgerTotals:
    return ledger.totals(filter, backward_fraction)


class Collectives:
    """Collective operations over a topology, writing to one ledger."""

    def __init__(self, topology: WorldTopology, ledger: TrafficLedger):
        self.topology = topology
        self.ledger = ledger

    def all_reduce_average(self, tensors: Sequence[np.ndarray], scope: str = GLOBAL,
                           step: int = 0, phase: str = "") -> np.ndarray:
        """Mean of one tensor per participant, summed in ascending rank order.

        ``tensors`` must be ordered like ``topology.participants(scope)``.
        """
        ranks = self.topology.participants(scope)
        if len(tensors) != len(ranks):
            raise ProtocolError(f"{scope}: expected {len(ranks)} contributions, got {len(tensors)}")
        shape, dtype = tensors[0].shape, tensors[0].dtype
        for r, t in zip(ranks, tensors):
            if t.shape != shape:
                raise ProtocolError(f"{scope}: rank {r} sent shape {t.shape}, expected {shape}")
        first = tensors[0].tobytes()
        if all(t.dtype == dtype and t.tobytes() == first for t in tensors[1:]):
            # (x + x + x) / 3 need not round back to x; agreement must be exact.
            self.ledger.record(step, phase, scope, tensors[0].size, len(ranks))
            return tensors[0].copy()
        acc = np.zeros(shape, dtype=np.float64)
        for t in tensors:
            acc += t
        mean = (acc / len(tensors)).astype(dtype, copy=False)
        self.ledger.record(step, phase, scope, mean.size, len(ranks))
        return mean

    def broadcast(self, tensor: np.ndarray, scope: str = GLOBAL, step: int = 0, phase: str = "") -> np.ndarray:
        ranks = self.topology.participants(scope)
        self.ledger.record(step, phase, scope, tensor.size, len(ranks), factor=broadcast_factor)
        return tensor.copy()


def pack(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate flattened arrays into one fused payload."""
    if not arrays:
        return np.zeros(0)
    return np.concatenate([a.ravel() for a in arrays])


def unpack(flat: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, offset = [], 0
    for a in like:
        out.append(flat[offset : offset + a.size].reshape(a.shape).copy())
        offset += a.size
    if offset != flat.size:
        raise ProtocolError("fused payload size does not match the tensors it should fill")
    return out
