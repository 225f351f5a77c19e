"""Shared fixtures and the independent brute-force search oracle."""

from __future__ import annotations

import itertools
from typing import Any

from dexi.indexing import FULL_CONFIG, DistributedExecutionIndex, InstantiationConfig
from dexi.programs import (
    Application,
    Assign,
    Concat,
    Const,
    Endpoint,
    EntryRequest,
    Return,
    Rpc,
    ServiceProgram,
    Try,
    Var,
)
from dexi.search import FaultCatalog
from dexi.simulator import ExecutionTrace, FaultPlan, FaultSpec, run_execution


def leaf_service(name: str, prefix: str) -> ServiceProgram:
    return ServiceProgram(
        name=name,
        endpoints={
            "get": Endpoint(
                method="get",
                params=(("req", "String"),),
                body=(Return(Concat((Const(prefix + ":"), Var("req")))),),
            )
        },
    )


def guarded_rpc(callee: str, line: int, default: str, assign: str) -> Try:
    return Try(
        body=(
            Rpc(service=callee, method="get", args=(("req", Var("req")),), line=line, assign=assign),
        ),
        catch=(Assign(var=assign, value=Const(default)),),
    )


def build_figure1() -> tuple[Application, EntryRequest]:
    """Fan-out topology: A calls B, C, D with per-call defaults; B calls E
    and propagates E's failure (B encapsulates E)."""
    a = ServiceProgram(
        name="a",
        endpoints={
            "front": Endpoint(
                method="front",
                params=(("req", "String"),),
                body=(
                    guarded_rpc("b", 3, "b-default", "rb"),
                    guarded_rpc("c", 5, "c-default", "rc"),
                    guarded_rpc("d", 7, "d-default", "rd"),
                    Return(Concat((Var("rb"), Const(" "), Var("rc"), Const(" "), Var("rd")))),
                ),
            )
        },
    )
    b = ServiceProgram(
        name="b",
        endpoints={
            "get": Endpoint(
                method="get",
                params=(("req", "String"),),
                body=(
                    Rpc(service="e", method="get", args=(("req", Var("req")),), line=12, assign="re"),
                    Return(Concat((Const("b["), Var("re"), Const("]")))),
                ),
            )
        },
    )
    app = Application(
        services={
            "a": a,
            "b": b,
            "c": leaf_service("c", "c"),
            "d": leaf_service("d", "d"),
            "e": leaf_service("e", "e"),
        }
    )
    return app, EntryRequest(service="a", method="front", args={"req": "r1"})


def symbolic(trace: ExecutionTrace, with_payload: bool = False) -> tuple:
    """Render a trace as the compact (stack-lines, count[, payload], faulted)
    tuples used for comparison against hand-written execution sequences."""
    fault_keys = {
        ev.dei.key() for ev in trace.events if ev.kind == "fault_injected" and ev.dei is not None
    }
    out = []
    for ev in trace.invocation_events():
        entry = ev.dei.last
        lines = entry.detail.callstack.render() if entry.detail else "?"
        item: tuple[Any, ...] = (lines, entry.count)
        if with_payload:
            values = entry.detail.payload.values if entry.detail else ()
            item += (values[0] if values else None,)
        item += (ev.dei.key() in fault_keys,)
        out.append(item)
    return tuple(out)


def _fault_points(
    discovered: set[DistributedExecutionIndex], catalog: FaultCatalog
) -> list[tuple[DistributedExecutionIndex, tuple[FaultSpec, ...]]]:
    points = []
    for dei in sorted(discovered, key=lambda d: d.key()):
        specs = catalog.faults_for_digest(dei.last.signature_digest)
        points.append((dei, specs))
    return points


def brute_force_execution_set(
    app: Application,
    entry: EntryRequest,
    catalog: FaultCatalog,
    config: InstantiationConfig = FULL_CONFIG,
    seed: int = 0,
    max_plans: int = 5000,
) -> dict[frozenset, ExecutionTrace]:
    """Replay every sub-assignment of discovered fault points to a fixpoint.

    Independent oracle for the worklist search: enumerates all combinations
    (including unreachable ones), keys each run by the faults that actually
    fired, and iterates until discovery stops growing. Returns the distinct
    effective executions.
    """
    discovered: set[DistributedExecutionIndex] = set()
    tried: set[frozenset] = set()
    effective: dict[frozenset, ExecutionTrace] = {}

    def run_one(plan_map: dict[DistributedExecutionIndex, FaultSpec]) -> None:
        plan = FaultPlan(plan_map, config=config)
        trace = run_execution(app, entry, plan, seed=seed, config=config)
        fired = frozenset(
            (ev.dei.key(), ev.outcome["fault"])
            for ev in trace.events
            if ev.kind == "fault_injected" and ev.dei is not None and ev.outcome
        )
        effective.setdefault(fired, trace)
        for dei in trace.invocation_deis():
            discovered.add(dei)

    run_one({})
    tried.add(frozenset())
    while True:
        candidates = []
        points = _fault_points(discovered, catalog)
        choice_lists = [[None] + [(dei, s) for s in specs] for dei, specs in points]
        for combo in itertools.product(*choice_lists):
            chosen = [c for c in combo if c is not None]
            if not chosen:
                continue
            plan_map = {dei: spec for dei, spec in chosen}
            key = frozenset((d.key(), s.fault_type) for d, s in plan_map.items())
            if key not in tried:
                candidates.append((key, plan_map))
        if not candidates:
            return effective
        if len(tried) + len(candidates) > max_plans:
            raise RuntimeError("oracle exceeded its plan budget")
        for key, plan_map in candidates:
            tried.add(key)
            run_one(plan_map)


def explore_execution_keys(report) -> set[frozenset]:
    """Effective-plan keys of an exploration report (for oracle comparison)."""
    keys = set()
    for ex in report.executions:
        keys.add(
            frozenset((dei.key(), spec.fault_type) for dei, spec in ex.plan.items())
        )
    return keys


def rpc_site_count(app: Application) -> int:
    from dexi.programs import OpenStream, Rpc as RpcStmt, iter_statements

    sites = 0
    for _, _, stmt in iter_statements(app):
        if isinstance(stmt, (RpcStmt, OpenStream)):
            sites += 1
    return sites
