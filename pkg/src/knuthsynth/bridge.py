"""Line-delimited JSON bridge to an out-of-process prior/value model.

Protocol (one JSON object per line over the child's stdin/stdout)::

    -> {"kind": "hello", "protocol": 1}
    <- {"ready": true}
    -> {"kind": "prior", "vars": N, "clauses": [[lit, ...], ...],
        "assigned": [lit, ...], "actions": [var, ...]}
    <- {"prior": [p, ...]}          # one entry per action, ascending variable order
    -> {"kind": "value", ...same payload...}
    <- {"value": x}                 # predicted log2 tree size

``actions`` is redundant (it is the sorted set of variables occurring in
``clauses``) and may be ignored by servers.
"""

import json
import logging
import math
import queue
import shlex
import subprocess
import sys
import threading

from .cnf import _clause_order
from .errors import BridgeError
from .models import Model, UniformModel

log = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-6
SUM_REJECT = 0.01


def state_payload(state, kind):
    return {
        "kind": kind,
        "vars": state.formula.num_variables,
        "clauses": [sorted(c, key=_clause_order) for c in state.residual],
        "assigned": sorted(state.literals, key=_clause_order),
        "actions": list(state.actions),
    }


class BridgeEndpoint:
    """A running model server.  One request in flight at a time."""

    def __init__(self, command, timeout=10.0, startup_timeout=30.0):
        if isinstance(command, str):
            command = shlex.split(command)
        command = list(command)
        if command and command[0].endswith(".py"):
            command.insert(0, sys.executable)
        self.command = command
        self.timeout = timeout
        self._lock = threading.Lock()
        self.dead = False
        self._lines = queue.Queue()
        self.proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     text=True, bufsize=1)
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        reply = self._roundtrip({"kind": "hello", "protocol": 1}, startup_timeout)
        if not reply.get("ready"):
            self.close()
            raise BridgeError("bad handshake reply %r" % reply)

    def _pump(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _roundtrip(self, message, timeout):
        with self._lock:
            if self.dead:
                raise BridgeError("endpoint abandoned after an earlier timeout")
            try:
                self.proc.stdin.write(json.dumps(message) + "\n")
                self.proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise BridgeError("endpoint not accepting input: %s" % exc) from None
            try:
                line = self._lines.get(timeout=timeout)
            except queue.Empty:
                # a late reply would desynchronise every later request
                self.dead = True
                raise BridgeError("no reply within %g s" % timeout) from None
        if line is None:
            raise BridgeError("endpoint closed its output")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError:
            raise BridgeError("malformed reply %r" % line.strip()) from None
        if not isinstance(reply, dict):
            raise BridgeError("reply is not an object: %r" % line.strip())
        return reply

    def request(self, message):
        return self._roundtrip(message, self.timeout)

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def validate_prior(values, n):
    if not isinstance(values, list) or len(values) != n:
        raise BridgeError("prior must be a list of %d numbers, got %r" % (n, values))
    try:
        vals = [float(v) for v in values]
    except (TypeError, ValueError):
        raise BridgeError("non-numeric prior entry in %r" % values) from None
    if any(not math.isfinite(v) or v < 0 for v in vals):
        raise BridgeError("prior entries must be finite and non-negative")
    total = math.fsum(vals)
    if abs(total - 1.0) > SUM_REJECT:
        raise BridgeError("prior sums to %g" % total)
    if abs(total - 1.0) > SUM_TOLERANCE:
        log.warning("renormalising bridge prior that sums to %.6g", total)
    return tuple(v / total for v in vals)


def bridge_query(endpoint: BridgeEndpoint, request: dict):
    """Send one prior/value request and validate the reply."""
    reply = endpoint.request(request)
    if request["kind"] == "prior":
        if "prior" not in reply:
            raise BridgeError("reply lacks 'prior': %r" % reply)
        return validate_prior(reply["prior"], len(request["actions"]))
    if request["kind"] == "value":
        try:
            v = float(reply["value"])
        except (KeyError, TypeError, ValueError):
            raise BridgeError("reply lacks a numeric 'value': %r" % reply) from None
        if not math.isfinite(v):
            raise BridgeError("non-finite value %r" % v)
        return v
    raise BridgeError("unknown request kind %r" % request["kind"])


class BridgeModel(Model):
    """Model backed by a bridge endpoint, falling back on any bridge error."""

    name = "bridge"
    has_value = True

    def __init__(self, endpoint: BridgeEndpoint, fallback: Model = None, default_value=0.0):
        self.endpoint = endpoint
        self.fallback = fallback or UniformModel()
        self.default_value = default_value
        self.failures = 0

    def prior(self, state):
        try:
            return bridge_query(self.endpoint, state_payload(state, "prior"))
        except BridgeError as exc:
            self.failures += 1
            log.warning("bridge prior failed (%s); using fallback", exc)
            return self.fallback.prior(state)

    def value(self, state):
        try:
            return bridge_query(self.endpoint, state_payload(state, "value"))
        except BridgeError as exc:
            self.failures += 1
            log.warning("bridge value failed (%s); using default", exc)
            return self.default_value
