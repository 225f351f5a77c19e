"""The scheduling-nondeterminism experiment on the fan-out app."""

from __future__ import annotations

import pytest

from dexi.experiment import (
    build_hello_world_app,
    hello_world_entry,
    run_nondeterminism_experiment,
)
from dexi.indexing import DexiError
from dexi.simulator import run_execution


def test_single_rpc_always_matches():
    result = run_nondeterminism_experiment(1, 2, 20)
    assert result.match_fraction == 1.0
    assert result.deterministic


def test_small_fanout_deterministic_indexes():
    result = run_nondeterminism_experiment(4, 2, 25)
    assert result.deterministic


def test_invalid_sizes_rejected():
    with pytest.raises(DexiError):
        run_nondeterminism_experiment(0, 2, 10)
    with pytest.raises(DexiError):
        run_nondeterminism_experiment(2, 0, 10)
    with pytest.raises(DexiError):
        run_nondeterminism_experiment(2, 2, 0)


def test_app_shape():
    app = build_hello_world_app()
    entry = hello_world_entry(3)
    trace = run_execution(app, entry)
    assert len(trace.invocation_events()) == 3
    payloads = {dict(e.payload)["tag"] for e in trace.invocation_events()}
    assert payloads == {"t000", "t001", "t002"}
    assert trace.entry_outcome == {"value": "world-t000 world-t001 world-t002"}
