"""Deterministic simulated message passing over the communication graph.

Rounds advance through named phases ("prox-term", then "x-broadcast"); the
engine owns the round-phase counter and opens one phase at a time, which is
the barrier: a send targeting anything but the open phase is a protocol
violation, and receives only see messages of the open phase.  Per
(sender, receiver, phase) delivery is FIFO and per round exactly-once.
Payloads are copied and frozen on send, so parallel workers can read them
without locks.

Statistics count messages per round and total payload scalars; an optional
log records every message (JSON lines) for determinism audits.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .problem import Graph

__all__ = ["Message", "NetworkStats", "Network", "ProtocolError", "PHASE_PROX", "PHASE_X"]

PHASE_PROX = "prox-term"
PHASE_X = "x-broadcast"
_PHASES = (PHASE_PROX, PHASE_X)


class ProtocolError(RuntimeError):
    """A send or receive violated the synchronous-round protocol."""


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    round: int
    phase: str
    payload: np.ndarray

    def __post_init__(self):
        payload = np.array(self.payload, dtype=float, copy=True)
        payload.setflags(write=False)
        object.__setattr__(self, "payload", payload)


@dataclass
class NetworkStats:
    messages_per_round: dict = field(default_factory=dict)
    total_messages: int = 0
    total_payload_scalars: int = 0
    barrier_waits: int = 0


class Network:
    """In-memory transport bound to one graph, one run."""

    def __init__(self, graph: Graph, log: bool = False):
        self.graph = graph
        self.stats = NetworkStats()
        self.message_log = [] if log else None
        self._queues: dict = {}  # (sender, receiver, phase) -> deque of Message
        self._seen: set = set()  # (sender, receiver, phase, round)
        self._open: tuple | None = None  # (round, phase)
        self._lock = threading.Lock()

    def open_phase(self, round_: int, phase: str) -> None:
        """Advance the round-phase counter (engine barrier release)."""
        if phase not in _PHASES:
            raise ProtocolError(f"unknown phase {phase!r}")
        with self._lock:
            self._open = (round_, phase)
            self.stats.barrier_waits += 1

    def send(self, msg: Message) -> None:
        if msg.sender == msg.receiver:
            raise ProtocolError(f"agent {msg.sender} sending to itself")
        if not self.graph.is_edge(msg.sender, msg.receiver):
            raise ProtocolError(f"({msg.sender} -> {msg.receiver}) is not a graph edge")
        key = (msg.sender, msg.receiver, msg.phase, msg.round)
        with self._lock:
            if self._open != (msg.round, msg.phase):
                raise ProtocolError(
                    f"send for ({msg.round}, {msg.phase}) while {self._open} is open"
                )
            if key in self._seen:
                raise ProtocolError(f"duplicate message {key}")
            self._seen.add(key)
            self._queues.setdefault(key[:3], deque()).append(msg)
            self.stats.total_messages += 1
            self.stats.total_payload_scalars += msg.payload.size
            self.stats.messages_per_round[msg.round] = (
                self.stats.messages_per_round.get(msg.round, 0) + 1
            )
            if self.message_log is not None:
                self.message_log.append(
                    {
                        "round": msg.round,
                        "phase": msg.phase,
                        "sender": msg.sender,
                        "receiver": msg.receiver,
                        "payload": [float(v) for v in msg.payload],
                    }
                )

    def receive_all(self, agent: int, round_: int, phase: str) -> list:
        """Messages from every neighbor of ``agent`` for the open phase, by sender id.

        In the synchronous engine all sends of a phase complete before any
        receive; a missing neighbor message therefore means a dead sender and
        aborts the round.
        """
        with self._lock:
            if self._open != (round_, phase):
                raise ProtocolError(
                    f"receive for ({round_}, {phase}) while {self._open} is open"
                )
            out = []
            for j in self.graph.neighborhood(agent):
                if j == agent:
                    continue
                queue = self._queues.get((j, agent, phase))
                if not queue:
                    raise ProtocolError(
                        f"no message from {j} to {agent} in round {round_} phase {phase}"
                    )
                msg = queue.popleft()
                if msg.round != round_:
                    raise ProtocolError(
                        f"out-of-order delivery from {j} to {agent}: "
                        f"got round {msg.round}, expected {round_}"
                    )
                out.append(msg)
            return out

    def dump_message_log(self, path) -> None:
        """Write the message log as JSON lines (requires ``log=True``)."""
        if self.message_log is None:
            raise ValueError("message logging was not enabled")
        with open(path, "w") as fh:
            for entry in self.message_log:
                fh.write(json.dumps(entry) + "\n")
