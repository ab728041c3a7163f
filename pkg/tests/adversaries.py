"""Hostile-host drivers shared by the guard tests and the acceptance suite."""

import random

from mlcapsule.errors import QuotaExceeded, RollbackDetected
from mlcapsule.guard import Crash, Guard


def run_crash_schedule(directory, key, seed, threshold=100):
    """A hostile host that crashes the process and restores stale files at random.

    Returns (released request ids, rollbacks detected).
    """
    rng = random.Random(seed)

    def crash(point):
        if rng.random() < 0.08:
            raise Crash(point)

    Guard.create(directory, key, threshold)
    released: dict[bytes, bytes] = {}
    snapshots: list[bytes] = []
    rollbacks = 0
    req = 0
    pending = None
    while True:
        g = Guard(directory, key, crash=crash)
        if snapshots and rng.random() < 0.1:
            current = g.state_path.read_bytes()
            old = rng.choice(snapshots)
            if old == current:
                continue
            g.state_path.write_bytes(old)
            try:
                g.admit(lambda: b"stale", request_id=b"stale-%d" % req)
                raise AssertionError("stale state accepted")
            except RollbackDetected:
                rollbacks += 1
            g.state_path.write_bytes(current)
            continue
        if rng.random() < 0.2:
            snapshots.append(g.state_path.read_bytes())
        rid = pending if pending is not None else b"req-%d" % req
        try:
            out = g.admit(lambda: b"posterior:" + rid, request_id=rid)
        except Crash:
            pending = rid
            continue
        except QuotaExceeded:
            break
        pending = None
        req += 1
        assert out == b"posterior:" + rid
        released[rid] = out
    return released, rollbacks
