"""Deterministic, splittable random number generation.

All randomized operations in the package take an explicit numpy Generator.
Generators are built on the counter-based Philox bit generator so that child
streams derived from (seed, key path) are independent and reproducible
regardless of how work is scheduled: a sweep point's stream depends only on
its index, never on worker count or execution order.
"""

from __future__ import annotations

import numpy as np


def make_generator(seed: int, *key: int) -> np.random.Generator:
    """Build a Philox generator for the stream identified by (seed, *key).

    Args:
        seed: root entropy for the whole run.
        key: integer path identifying the child stream (e.g. sweep point
            index, repeat index). An empty path gives the root stream.

    Returns:
        An independent numpy Generator; calls with equal (seed, key) always
        produce identical draws.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def generator_state(rng: np.random.Generator) -> dict:
    """JSON-compatible snapshot of a generator's state (for resumable runs)."""
    state = rng.bit_generator.state
    # Philox stores counter/key as numpy uint64 arrays; make them lists.
    out = {"bit_generator": state["bit_generator"], "state": {}, "buffer": None}
    inner = {}
    for k, v in state["state"].items():
        inner[k] = v.tolist() if isinstance(v, np.ndarray) else int(v)
    out["state"] = inner
    if "buffer" in state:
        out["buffer"] = state["buffer"].tolist()
    for k in ("buffer_pos", "has_uint32", "uinteger"):
        if k in state:
            out[k] = int(state[k])
    return out


def restore_generator(snapshot: dict) -> np.random.Generator:
    """Rebuild a generator from a generator_state() snapshot."""
    rng = np.random.Generator(np.random.Philox())
    state = {"bit_generator": snapshot["bit_generator"]}
    inner = {}
    for k, v in snapshot["state"].items():
        inner[k] = np.array(v, dtype=np.uint64) if isinstance(v, list) else int(v)
    state["state"] = inner
    if snapshot.get("buffer") is not None:
        state["buffer"] = np.array(snapshot["buffer"], dtype=np.uint64)
    for k in ("buffer_pos", "has_uint32", "uinteger"):
        if k in snapshot:
            state[k] = snapshot[k]
    rng.bit_generator.state = state
    return rng
