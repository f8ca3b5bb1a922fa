import json
import math
import time

import numpy as np
import pytest
from starlette.testclient import TestClient

from magprobe.experiments import builtin_scenarios
from magprobe.teleop import create_app


@pytest.fixture(scope="module")
def client():
    scn = builtin_scenarios()["straightline_tracking"]
    app = create_app(scn, state_rate=20.0)
    with TestClient(app) as c:
        yield c


def _next_of_type(ws, msg_type, limit=400):
    for _ in range(limit):
        msg = ws.receive_json()
        if msg["type"] == msg_type:
            return msg
    raise AssertionError(f"no {msg_type} message within {limit} messages")


def test_health_and_scenario_endpoints(client):
    health = client.get("/health").json()
    assert health["status"] == "ok"
    doc = client.get("/scenario").json()
    assert doc["name"] == "straightline_tracking"


def test_state_stream_rate(client):
    # the broadcast cadence is wall-clock paced at 20 Hz
    with client.websocket_connect("/session") as ws:
        _next_of_type(ws, "state")
        t0 = time.monotonic()
        n = 0
        while time.monotonic() - t0 < 10.0:
            msg = ws.receive_json()
            if msg["type"] == "state":
                n += 1
        rate = n / 10.0
        assert 18.0 <= rate <= 22.0, rate


def test_state_self_consistency(client):
    with client.websocket_connect("/session") as ws:
        for _ in range(5):
            msg = _next_of_type(ws, "state")
            est_p = np.array(msg["estimated"]["position"])
            est_m = np.array(msg["estimated"]["moment_dir"])
            tgt_p = np.array(msg["target"]["position"])
            tgt_m = np.array(msg["target"]["moment_dir"])
            pos_err = float(np.linalg.norm(tgt_p - est_p))
            orient_err = math.acos(float(np.clip(est_m @ tgt_m, -1, 1)))
            assert abs(msg["errors"]["position"] - pos_err) < 1e-9
            assert abs(msg["errors"]["orientation"] - orient_err) < 1e-9


def test_advance_command_round_trip(client):
    with client.websocket_connect("/session") as ws:
        before = _next_of_type(ws, "state")
        ws.send_text(
            json.dumps({"type": "command", "id": "adv-1", "action": "advance", "amount": 0.01})
        )
        ack = _next_of_type(ws, "ack")
        assert ack["id"] == "adv-1"
        assert ack["ok"] is True
        # target in the ack matches the target echoed by subsequent states
        state = _next_of_type(ws, "state")
        assert np.allclose(state["target"]["position"], ack["target"]["position"], atol=1e-9)
        moved = np.array(state["target"]["position"]) - np.array(before["target"]["position"])
        assert np.linalg.norm(moved) == pytest.approx(0.01, abs=1e-6)


def test_error_decays_after_command(client):
    with client.websocket_connect("/session") as ws:
        ws.send_text(
            json.dumps({"type": "command", "id": "adv-2", "action": "advance", "amount": 0.01})
        )
        _next_of_type(ws, "ack")
        first = _next_of_type(ws, "state")
        early = first["errors"]["position"]
        t_start = first["t"]
        # give the loop 8 simulated seconds (the physics task may run slower
        # than real time during solver escalations)
        deadline = time.monotonic() + 45.0
        best = early
        while time.monotonic() < deadline:
            msg = ws.receive_json()
            if msg["type"] != "state":
                continue
            best = min(best, msg["errors"]["position"])
            if best < 0.6 * early:
                break
            if msg["t"] - t_start > 8.0:
                break
        assert best < 0.6 * early


def test_malformed_json_keeps_connection(client):
    with client.websocket_connect("/session") as ws:
        ws.send_text("{not json")
        err = _next_of_type(ws, "error")
        assert "bad json" in err["reason"]
        ws.send_text(json.dumps({"type": "command", "id": "after-error", "action": "resume"}))
        ack = _next_of_type(ws, "ack")
        assert ack["id"] == "after-error"


def test_non_command_message_rejected(client):
    with client.websocket_connect("/session") as ws:
        ws.send_text(json.dumps({"type": "telemetry"}))
        err = _next_of_type(ws, "error")
        assert "command" in err["reason"]


def test_oversized_command_rejected_with_clamp_notice(client):
    with client.websocket_connect("/session") as ws:
        ws.send_text(
            json.dumps({"type": "command", "id": "big", "action": "advance", "amount": 0.1})
        )
        ack = _next_of_type(ws, "ack")
        assert ack["id"] == "big"
        assert ack["ok"] is False
        assert "clamp" in ack["reason"]


def test_command_ordering_by_sequence(client):
    with client.websocket_connect("/session") as ws:
        ws.send_text(
            json.dumps({"type": "command", "id": "a", "action": "turn_right", "amount": 0.05})
        )
        ws.send_text(
            json.dumps({"type": "command", "id": "b", "action": "turn_left", "amount": 0.05})
        )
        acks = []
        while len(acks) < 2:
            msg = ws.receive_json()
            if msg["type"] == "ack":
                acks.append(msg)
        assert [a["id"] for a in acks] == ["a", "b"]
        assert acks[0]["seq"] < acks[1]["seq"]


def test_pause_freezes_time_between_acks(client):
    with client.websocket_connect("/session") as ws:
        ws.send_text(json.dumps({"type": "command", "id": "p1", "action": "pause"}))
        _next_of_type(ws, "ack")
        s1 = _next_of_type(ws, "state")
        time.sleep(0.4)
        # drain queued states; time must not advance while paused
        s2 = _next_of_type(ws, "state")
        for _ in range(10):
            s2 = _next_of_type(ws, "state")
        assert s2["t"] == s1["t"]
        assert s2["running"] is False
        ws.send_text(json.dumps({"type": "command", "id": "p2", "action": "resume"}))
        _next_of_type(ws, "ack")
        deadline = time.monotonic() + 2.0
        resumed = False
        while time.monotonic() < deadline:
            s3 = _next_of_type(ws, "state")
            if s3["t"] > s1["t"]:
                resumed = True
                break
        assert resumed


def test_disturb_command(client):
    with client.websocket_connect("/session") as ws:
        ws.send_text(
            json.dumps(
                {
                    "type": "command",
                    "id": "d1",
                    "action": "disturb",
                    "force": [0.0, 0.4, 0.0],
                    "duration": 0.1,
                }
            )
        )
        ack = _next_of_type(ws, "ack")
        assert ack["ok"] is True
        # transient: position error grows then recovers
        peak = 0.0
        t0 = time.monotonic()
        while time.monotonic() - t0 < 3.0:
            msg = ws.receive_json()
            if msg["type"] == "state":
                peak = max(peak, msg["errors"]["position"])
        assert peak > 0.002


def test_session_survives_reconnect(client):
    with client.websocket_connect("/session") as ws:
        t1 = _next_of_type(ws, "state")["t"]
    with client.websocket_connect("/session") as ws:
        t2 = _next_of_type(ws, "state")["t"]
    assert t2 >= t1  # same session kept running, no reset
