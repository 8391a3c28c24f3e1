import logging

import pytest

from conftest import fixture_path, raw_state
from knuthsynth.bridge import (BridgeEndpoint, BridgeModel, bridge_query, state_payload,
                               validate_prior)
from knuthsynth.errors import BridgeError


def endpoint(mode="ok", timeout=5.0):
    return BridgeEndpoint([fixture_path("echo_bridge.py"), mode], timeout=timeout)


STATE = raw_state([[1, 2, -3], [2, 3]])


def test_payload_shape():
    p = state_payload(STATE, "prior")
    assert p["actions"] == [1, 2, 3] and p["vars"] == 3 and p["assigned"] == []


def test_value_and_prior():
    with endpoint() as ep:
        assert bridge_query(ep, state_payload(STATE, "value")) == 3.0
        assert bridge_query(ep, state_payload(STATE, "prior")) == pytest.approx((1 / 3,) * 3)


def test_round_trip_echo():
    with endpoint() as ep:
        msg = {"kind": "echo", "payload": [1, [2, 3], {"a": None}]}
        assert ep.request(msg)["echo"] == msg


def test_slightly_off_renormalised(caplog):
    with caplog.at_level(logging.WARNING):
        with endpoint("slightly_off") as ep:
            p = bridge_query(ep, state_payload(STATE, "prior"))
    assert sum(p) == pytest.approx(1.0, abs=1e-12)
    assert "renormalising" in caplog.text


def test_half_mass_rejected():
    with endpoint("half") as ep:
        with pytest.raises(BridgeError):
            bridge_query(ep, state_payload(STATE, "prior"))


def test_garbage_rejected():
    with endpoint("garbage") as ep:
        with pytest.raises(BridgeError, match="malformed"):
            bridge_query(ep, state_payload(STATE, "prior"))


def test_timeout_marks_dead():
    with endpoint("silent", timeout=0.3) as ep:
        with pytest.raises(BridgeError, match="no reply"):
            bridge_query(ep, state_payload(STATE, "prior"))
        assert ep.dead
        with pytest.raises(BridgeError, match="abandoned"):
            bridge_query(ep, state_payload(STATE, "value"))


def test_validate_prior():
    assert validate_prior([0.25, 0.75], 2) == (0.25, 0.75)
    for bad in ([0.5], [1, "x"], [-0.5, 1.5], [float("nan"), 1.0], "nope"):
        with pytest.raises(BridgeError):
            validate_prior(bad, 2)


def test_bridge_model_falls_back():
    with endpoint("half") as ep:
        m = BridgeModel(ep, default_value=1.5)
        assert m.prior(STATE) == (1 / 3,) * 3
        assert m.value(STATE) == 3.0
        assert m.failures == 1
    with endpoint("silent", timeout=0.2) as ep:
        m = BridgeModel(ep, default_value=1.5)
        assert m.prior(STATE) == (1 / 3,) * 3 and m.failures == 1
        # endpoint is abandoned, so the value query falls back as well
        assert m.value(STATE) == 1.5 and m.failures == 2


def test_bad_command():
    with pytest.raises((BridgeError, OSError)):
        BridgeEndpoint(["/nonexistent/model-server"])
