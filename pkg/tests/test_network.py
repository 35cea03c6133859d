import json

import numpy as np
import pytest

from gpdmpc.network import PHASE_PROX, PHASE_X, Message, Network, ProtocolError
from gpdmpc.problem import Graph


@pytest.fixture
def net():
    return Network(Graph.chain(3))


def test_send_requires_open_phase(net):
    with pytest.raises(ProtocolError):
        net.send(Message(0, 1, 0, PHASE_PROX, np.zeros(2)))
    net.open_phase(0, PHASE_PROX)
    net.send(Message(0, 1, 0, PHASE_PROX, np.zeros(2)))
    with pytest.raises(ProtocolError):
        net.send(Message(1, 0, 0, PHASE_X, np.zeros(2)))
    with pytest.raises(ProtocolError):
        net.send(Message(1, 0, 1, PHASE_PROX, np.zeros(2)))


def test_self_send_rejected(net):
    net.open_phase(0, PHASE_PROX)
    with pytest.raises(ProtocolError):
        net.send(Message(1, 1, 0, PHASE_PROX, np.zeros(1)))


def test_non_edge_rejected(net):
    net.open_phase(0, PHASE_PROX)
    with pytest.raises(ProtocolError):
        net.send(Message(0, 2, 0, PHASE_PROX, np.zeros(1)))


def test_duplicate_send_rejected(net):
    net.open_phase(0, PHASE_PROX)
    net.send(Message(0, 1, 0, PHASE_PROX, np.ones(1)))
    with pytest.raises(ProtocolError):
        net.send(Message(0, 1, 0, PHASE_PROX, np.ones(1)))


def test_unknown_phase_name(net):
    with pytest.raises(ProtocolError):
        net.open_phase(0, "gossip")


def test_receive_sorted_by_sender_with_payloads(net):
    net.open_phase(3, PHASE_X)
    net.send(Message(2, 1, 3, PHASE_X, np.array([2.0, 2.5])))
    net.send(Message(0, 1, 3, PHASE_X, np.array([0.5])))
    msgs = net.receive_all(1, 3, PHASE_X)
    assert [m.sender for m in msgs] == [0, 2]
    assert msgs[0].payload.tolist() == [0.5]
    assert msgs[1].payload.tolist() == [2.0, 2.5]


def test_receive_missing_neighbor(net):
    net.open_phase(0, PHASE_PROX)
    net.send(Message(0, 1, 0, PHASE_PROX, np.zeros(1)))
    with pytest.raises(ProtocolError, match="no message from 2"):
        net.receive_all(1, 0, PHASE_PROX)


def test_receive_on_closed_phase(net):
    net.open_phase(0, PHASE_PROX)
    net.send(Message(0, 1, 0, PHASE_PROX, np.zeros(1)))
    net.open_phase(0, PHASE_X)
    with pytest.raises(ProtocolError):
        net.receive_all(1, 0, PHASE_PROX)


def test_stale_message_detected():
    # A queue left unread in round 0 surfaces as out-of-order delivery later.
    net = Network(Graph.chain(2))
    net.open_phase(0, PHASE_PROX)
    net.send(Message(0, 1, 0, PHASE_PROX, np.zeros(1)))
    net.open_phase(1, PHASE_PROX)
    net.send(Message(0, 1, 1, PHASE_PROX, np.zeros(1)))
    with pytest.raises(ProtocolError, match="out-of-order"):
        net.receive_all(1, 1, PHASE_PROX)


def test_payload_frozen_and_copied(net):
    src = np.array([1.0, 2.0])
    msg = Message(0, 1, 0, PHASE_PROX, src)
    src[0] = 99.0
    assert msg.payload[0] == 1.0
    assert not msg.payload.flags.writeable
    with pytest.raises(ValueError):
        msg.payload[0] = 5.0


def test_stats_counting(net):
    net.open_phase(0, PHASE_PROX)
    net.send(Message(0, 1, 0, PHASE_PROX, np.zeros(3)))
    net.send(Message(1, 0, 0, PHASE_PROX, np.zeros(2)))
    net.open_phase(0, PHASE_X)
    net.send(Message(1, 2, 0, PHASE_X, np.zeros(4)))
    net.open_phase(1, PHASE_PROX)
    net.send(Message(2, 1, 1, PHASE_PROX, np.zeros(1)))
    s = net.stats
    assert s.total_messages == 4
    assert s.messages_per_round == {0: 3, 1: 1}
    assert s.total_payload_scalars == 3 + 2 + 4 + 1
    assert s.barrier_waits == 3


def test_message_log_roundtrip(tmp_path):
    net = Network(Graph.chain(2), log=True)
    net.open_phase(0, PHASE_PROX)
    net.send(Message(0, 1, 0, PHASE_PROX, np.array([0.125, -3.0])))
    path = tmp_path / "log.jsonl"
    net.dump_message_log(path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert lines == [
        {
            "round": 0,
            "phase": PHASE_PROX,
            "sender": 0,
            "receiver": 1,
            "payload": [0.125, -3.0],
        }
    ]


def test_message_log_disabled(tmp_path, net):
    with pytest.raises(ValueError):
        net.dump_message_log(tmp_path / "log.jsonl")
