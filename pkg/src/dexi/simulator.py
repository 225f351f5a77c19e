"""In-process microservice fabric with execution-index assignment.

Runs declarative applications on a synthetic RPC layer: every invocation gets
a distributed execution index (under the active instantiation), the index
travels with the request as encoded metadata, faults from a plan are raised at
the caller's call site, and streaming RPCs receive preliminary indexes that
are rewritten to their final form before the trace is surrendered.

Two scheduling modes are provided. The virtual scheduler runs concurrent
blocks in a seeded order, giving reproducible traces; the thread scheduler
runs them on a bounded worker pool with jittered dispatch, reproducing the
genuine scheduling nondeterminism that index assignment must survive.
"""

from __future__ import annotations

import copy
import itertools
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterable, Mapping

from . import indexing
from .indexing import (
    INDEX_METADATA_KEY,
    PRELIMINARY_METADATA_KEY,
    CallStackDigest,
    CallStackPolicy,
    CounterState,
    DEFAULT_STACK_POLICY,
    DexiError,
    DistributedExecutionIndex,
    EMPTY_INDEX,
    EMPTY_PAYLOAD,
    FULL_CONFIG,
    InstantiationConfig,
    InvocationPayload,
    InvocationSignature,
    Signature,
    dei_extend,
    make_invocation_signature,
    mask_invocation_signature,
)
from .programs import (
    Application,
    Append,
    Assign,
    AwaitAll,
    Break,
    CallHelper,
    CloseStream,
    Concat,
    Const,
    EntryRequest,
    Eq,
    Expr,
    First,
    If,
    IsSet,
    Join,
    ListExpr,
    Loop,
    Not,
    OpenStream,
    Raise,
    Return,
    Rpc,
    Spawn,
    Stmt,
    StreamSend,
    Try,
    Var,
)

DEFAULT_STEP_BUDGET = 200_000

CONNECTION_ERROR = "connection-error"


class StepBudgetExceededError(DexiError):
    """The execution ran past its statement budget (runaway-loop guard)."""


class MalformedPlanError(DexiError):
    """A fault plan key does not belong to the active instantiation."""


class StreamStateError(DexiError):
    """A stream was used after close or finalized with sends in flight."""


class MetadataError(DexiError):
    """Incoming RPC metadata could not be decoded."""


@dataclass(frozen=True)
class FaultSpec:
    """A fault to inject: a raised error, or a shaped response value."""

    fault_type: str = CONNECTION_ERROR
    mode: str = "exception"  # "exception" | "response"
    response: Any = None

    def descriptor(self) -> dict[str, Any]:
        if self.mode == "response":
            return {"fault": self.fault_type, "response": self.response}
        return {"fault": self.fault_type}


class FaultPlan:
    """The set of (index -> fault) injections applied during one execution."""

    def __init__(
        self,
        injections: Mapping[DistributedExecutionIndex, FaultSpec] | None = None,
        *,
        config: InstantiationConfig = FULL_CONFIG,
    ) -> None:
        self._by_key: dict[tuple, tuple[DistributedExecutionIndex, FaultSpec]] = {}
        for dei, spec in (injections or {}).items():
            if indexing.project(dei, config) != dei:
                raise MalformedPlanError(
                    f"plan key {dei.render()} is not in the identifier space of the "
                    "active instantiation"
                )
            self._by_key[dei.key()] = (dei, spec)

    def __len__(self) -> int:
        return len(self._by_key)

    def __contains__(self, dei: DistributedExecutionIndex) -> bool:
        return dei.key() in self._by_key

    def match(self, dei: DistributedExecutionIndex) -> FaultSpec | None:
        hit = self._by_key.get(dei.key())
        return hit[1] if hit else None

    def items(self) -> list[tuple[DistributedExecutionIndex, FaultSpec]]:
        return list(self._by_key.values())

    def key(self) -> frozenset:
        """Value identity of the plan, for deduplication across executions."""
        return frozenset((k, spec.fault_type, spec.mode) for k, (_, spec) in self._by_key.items())


EMPTY_PLAN = FaultPlan()


@dataclass(frozen=True)
class RpcEvent:
    """One recorded step of an execution.

    `lineage` is the task path of the recording task (empty for the root);
    two events are causally ordered only when one lineage prefixes the other.
    """

    kind: str  # invocation | fault_injected | completion | stream_opened | index_rewritten
    sequence_number: int
    caller: str
    callee: str
    method: str
    dei: DistributedExecutionIndex | None = None
    preliminary_dei: DistributedExecutionIndex | None = None
    payload: tuple[tuple[str, Any], ...] | None = None
    outcome: dict[str, Any] | None = None
    lineage: tuple[int, ...] = ()

    def causally_precedes(self, other: RpcEvent) -> bool:
        shorter = min(len(self.lineage), len(other.lineage))
        related = self.lineage[:shorter] == other.lineage[:shorter]
        return related and self.sequence_number < other.sequence_number

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "kind": self.kind,
            "seq": self.sequence_number,
            "caller": self.caller,
            "callee": self.callee,
            "method": self.method,
            "task": list(self.lineage),
        }
        if self.dei is not None:
            doc["dei"] = indexing.encode(self.dei)
        if self.preliminary_dei is not None:
            doc["preliminary_dei"] = indexing.encode(self.preliminary_dei)
        if self.payload is not None:
            doc["payload"] = {name: value for name, value in self.payload}
        if self.outcome is not None:
            doc["outcome"] = self.outcome
        return doc


@dataclass(frozen=True)
class ExecutionTrace:
    """Finalized record of one test execution."""

    events: tuple[RpcEvent, ...]
    entry_request: EntryRequest
    entry_outcome: dict[str, Any]
    seed: int
    scheduler_mode: str
    config: InstantiationConfig
    warnings: tuple[str, ...] = ()

    def invocation_events(self) -> list[RpcEvent]:
        return [e for e in self.events if e.kind == "invocation"]

    def invocation_deis(self) -> list[DistributedExecutionIndex]:
        return [e.dei for e in self.invocation_events() if e.dei is not None]

    def dei_multiset(self) -> tuple[str, ...]:
        return tuple(sorted(indexing.encode(d) for d in self.invocation_deis()))

    def to_json_lines(self) -> list[str]:
        import json as _json

        header = {
            "kind": "trace_header",
            "entry": {
                "service": self.entry_request.service,
                "method": self.entry_request.method,
                "args": dict(self.entry_request.args),
            },
            "entry_outcome": self.entry_outcome,
            "seed": self.seed,
            "scheduler": self.scheduler_mode,
            "warnings": list(self.warnings),
        }
        lines = [_json.dumps(header, sort_keys=True)]
        lines.extend(_json.dumps(e.to_json(), sort_keys=True) for e in self.events)
        return lines


# ---------------------------------------------------------------------------
# Control-flow signals raised inside interpreted programs


class RpcFailure(Exception):
    """An RPC failed at the call site; catchable by the program's try/catch."""

    def __init__(self, descriptor: dict[str, Any], injected: bool = False) -> None:
        super().__init__(descriptor.get("fault", "fault"))
        self.descriptor = descriptor
        self.injected = injected


class HandlerAbort(Exception):
    """A handler gave up (explicit raise statement)."""

    def __init__(self, fault_type: str) -> None:
        super().__init__(fault_type)
        self.fault_type = fault_type


class _BreakSignal(Exception):
    pass


class _ReturnSignal(Exception):
    def __init__(self, value: Any) -> None:
        super().__init__()
        self.value = value


# ---------------------------------------------------------------------------
# Schedulers


class _TaskHandle:
    def __init__(self, index: int) -> None:
        self.index = index
        self.done = False
        self.value: Any = None
        self.error: Exception | None = None

    def finish(self, runner: Callable[[], Any]) -> None:
        try:
            self.value = runner()
        except Exception as exc:  # surfaced at await_all, in creation order
            self.error = exc
        self.done = True


class VirtualScheduler:
    """Seeded cooperative scheduler: concurrent blocks run in shuffled order."""

    mode = "virtual"

    def __init__(self, seed: int = 0) -> None:
        self._rng = random.Random(seed)
        self._pending: dict[int, Callable[[], Any]] = {}
        self._counter = itertools.count()

    def spawn(self, runner: Callable[[], Any], depth: int) -> _TaskHandle:
        handle = _TaskHandle(next(self._counter))
        self._pending[handle.index] = runner
        return handle

    def await_all(self, handles: list[_TaskHandle]) -> None:
        waiting = [h for h in handles if not h.done]
        self._rng.shuffle(waiting)
        for handle in waiting:
            runner = self._pending.pop(handle.index, None)
            if runner is not None:
                handle.finish(runner)

    def pre_dispatch(self) -> None:
        pass

    def drain(self) -> None:
        # Blocks that were spawned but never awaited are treated as cancelled.
        self._pending.clear()

    def close(self) -> None:
        self._pending.clear()


class ThreadScheduler:
    """Real worker-pool scheduler with jittered dispatch.

    The jitter models the transport latency variance a live RPC stack sees;
    it is what makes arrival order genuinely racy even for tiny in-process
    handlers. Nested concurrent blocks run inline on their parent's worker so
    a small pool can never deadlock on itself.
    """

    mode = "threads"

    def __init__(self, pool_size: int = 2, jitter_seconds: float = 100e-6) -> None:
        if pool_size < 1:
            raise DexiError("pool size must be >= 1")
        self._executor = ThreadPoolExecutor(max_workers=pool_size)
        self._jitter = jitter_seconds
        self._rng = random.SystemRandom()
        self._counter = itertools.count()
        self._futures: list = []

    def spawn(self, runner: Callable[[], Any], depth: int) -> _TaskHandle:
        handle = _TaskHandle(next(self._counter))
        if depth == 0:
            future = self._executor.submit(handle.finish, runner)
            handle._future = future  # type: ignore[attr-defined]
            self._futures.append(future)
        else:
            # Nested blocks run inline on the parent's worker so a small pool
            # cannot deadlock on itself.
            handle._runner = runner  # type: ignore[attr-defined]
        return handle

    def await_all(self, handles: list[_TaskHandle]) -> None:
        for handle in handles:
            future = getattr(handle, "_future", None)
            if future is not None:
                future.result()
            elif not handle.done:
                handle.finish(handle._runner)  # type: ignore[attr-defined]

    def pre_dispatch(self) -> None:
        if self._jitter > 0:
            time.sleep(self._rng.uniform(0.0, self._jitter))

    def drain(self) -> None:
        for future in self._futures:
            future.result()
        self._futures.clear()

    def close(self) -> None:
        self._executor.shutdown(wait=True)


def _make_scheduler(mode: str, seed: int, pool_size: int) -> VirtualScheduler | ThreadScheduler:
    if mode == "virtual":
        return VirtualScheduler(seed)
    if mode == "threads":
        return ThreadScheduler(pool_size)
    raise DexiError(f"unknown scheduler mode {mode!r}; expected 'virtual' or 'threads'")


# ---------------------------------------------------------------------------
# Streams


class _Stream:
    def __init__(
        self,
        callee: str,
        method: str,
        signature: Signature,
        prelim_inv: InvocationSignature,
        base_path: DistributedExecutionIndex,
        base_count: int,
        frames: tuple[tuple[str, str], ...],
    ) -> None:
        self.callee = callee
        self.method = method
        self.signature = signature
        self.prelim_inv = prelim_inv
        self.base_path = base_path
        self.base_count = base_count
        self.frames = frames
        self.delivered = 0
        self.in_flight = 0
        self.open = True
        self.lock = threading.Lock()
        self.pairs: list[tuple[DistributedExecutionIndex, DistributedExecutionIndex]] = []


# ---------------------------------------------------------------------------
# Execution environment


class _HandlerCtx:
    """Per-handler interpreter state: variables, frames, path, task lineage."""

    __slots__ = ("service", "symbol", "scope", "frames", "path", "lineage", "streams")

    def __init__(self, service, symbol, scope, frames, path, lineage):
        self.service = service
        self.symbol = symbol
        self.scope = scope
        self.frames = frames
        self.path = path
        self.lineage = lineage
        self.streams: list[_Stream] = []

    def child(self, symbol=None, scope=None, frames=None, lineage=None) -> "_HandlerCtx":
        ctx = _HandlerCtx(
            self.service,
            symbol if symbol is not None else self.symbol,
            scope if scope is not None else self.scope,
            frames if frames is not None else self.frames,
            self.path,
            lineage if lineage is not None else self.lineage,
        )
        ctx.streams = self.streams
        return ctx


class _Execution:
    def __init__(
        self,
        app: Application,
        plan: FaultPlan,
        config: InstantiationConfig,
        scheduler,
        seed: int,
        budget: int,
        stack_policy: CallStackPolicy,
    ) -> None:
        self.app = app
        self.plan = plan
        self.config = config
        self.scheduler = scheduler
        self.seed = seed
        self.budget = budget
        self.stack_policy = stack_policy
        self.counter = CounterState()
        self.events: list[RpcEvent] = []
        self.warnings: list[str] = []
        self.rewrites: dict[tuple, DistributedExecutionIndex] = {}
        self.detail_table: dict[tuple[str, str, str], InvocationSignature] = {}
        self.assigned: set[tuple] = set()
        self._lock = threading.Lock()
        self._seq = itertools.count()
        self._steps = 0

    # -- bookkeeping

    def step(self) -> None:
        with self._lock:
            self._steps += 1
            if self._steps > self.budget:
                raise StepBudgetExceededError(
                    f"execution exceeded its step budget of {self.budget}"
                )

    def record(self, **kwargs) -> RpcEvent:
        with self._lock:
            event = RpcEvent(sequence_number=next(self._seq), **kwargs)
            self.events.append(event)
        return event

    def warn(self, message: str) -> None:
        with self._lock:
            if message not in self.warnings:
                self.warnings.append(message)

    # -- index assignment

    def assign_index(
        self,
        path: DistributedExecutionIndex,
        inv_sig: InvocationSignature,
        lineage: tuple[int, ...],
        preliminary: bool = False,
    ) -> DistributedExecutionIndex:
        id_path = path if self.config.include_path else EMPTY_INDEX
        id_inv = mask_invocation_signature(inv_sig, self.config)
        self.detail_table[id_inv.digest_triple()] = id_inv
        if self.config.include_count:
            count, raced = self.counter.claim(id_path, id_inv, lineage)
            if raced:
                self.warn(
                    "detected-ambiguity: concurrent RPCs share signature, stack, and "
                    f"payload at {id_inv.render()}; counts may permute across executions"
                )
        else:
            count = 1
        dei = dei_extend(id_path, id_inv, count)
        if preliminary:
            dei = _mark_last_preliminary(dei)
        else:
            with self._lock:
                key = dei.key()
                collided = key in self.assigned
                self.assigned.add(key)
            if collided:
                self.warn(
                    f"identifier collision under the active instantiation: {dei.render()}"
                )
        return dei

    def normalize(self, dei: DistributedExecutionIndex) -> DistributedExecutionIndex:
        """Resolve preliminary stream prefixes to their final form."""
        return _apply_rewrites(dei, self.rewrites)

    # -- context propagation

    def propagate_context(self, metadata: Mapping[str, str] | None) -> DistributedExecutionIndex:
        if metadata is None or INDEX_METADATA_KEY not in metadata:
            return EMPTY_INDEX
        try:
            dei = indexing.decode(metadata[INDEX_METADATA_KEY])
        except indexing.DecodeError as exc:
            raise MetadataError(f"undecodable index metadata: {exc}") from exc
        preliminary = metadata.get(PRELIMINARY_METADATA_KEY) == "true"
        entries = []
        for position, entry in enumerate(dei.entries):
            detail = self.detail_table.get(entry.digest_key())
            is_last = position == len(dei.entries) - 1
            entries.append(
                replace(entry, detail=detail, preliminary=entry.preliminary or (preliminary and is_last))
            )
        return DistributedExecutionIndex(tuple(entries))

    # -- RPC dispatch

    def dispatch_entry(self, entry: EntryRequest) -> dict[str, Any]:
        self.app.validate_entry(entry)
        try:
            value = self.handle(entry.service, entry.method, copy.deepcopy(dict(entry.args)), None, ())
            return {"value": value}
        except RpcFailure as failure:
            return dict(failure.descriptor)
        except HandlerAbort as abort:
            return {"fault": abort.fault_type}

    def handle(
        self,
        service: str,
        method: str,
        args: dict[str, Any],
        metadata: Mapping[str, str] | None,
        lineage: tuple[int, ...],
    ) -> Any:
        endpoint = self.app.endpoint(service, method)
        path = self.propagate_context(metadata)
        scope = {name: args[name] for name, _ in endpoint.params}
        ctx = _HandlerCtx(self.app.services[service], method, scope, (), path, lineage)
        try:
            try:
                self.exec_body(ctx, endpoint.body)
                return None
            except _ReturnSignal as ret:
                return ret.value
        finally:
            for stream in ctx.streams:
                if stream.open:
                    self.finalize_stream(stream)

    def invoke_rpc(
        self,
        ctx: _HandlerCtx,
        callee: str,
        method: str,
        args: dict[str, Any],
        frames: tuple[tuple[str, str], ...],
    ) -> Any:
        endpoint = self.app.endpoint(callee, method)
        sig = Signature(callee, method, endpoint.params)
        payload = InvocationPayload.from_mapping(sig, args)
        stack = CallStackDigest.from_frames(frames, self.stack_policy)
        inv = make_invocation_signature(sig, payload, stack)
        self.scheduler.pre_dispatch()
        dei = self.assign_index(ctx.path, inv, ctx.lineage)
        ordered_args = tuple((name, args[name]) for name, _ in endpoint.params)
        self.record(
            kind="invocation",
            caller=ctx.service.name,
            callee=callee,
            method=method,
            dei=dei,
            payload=ordered_args,
            lineage=ctx.lineage,
        )
        spec = self.plan.match(self.normalize(dei))
        if spec is not None:
            self.record(
                kind="fault_injected",
                caller=ctx.service.name,
                callee=callee,
                method=method,
                dei=dei,
                outcome=spec.descriptor(),
                lineage=ctx.lineage,
            )
            if spec.mode == "response":
                return spec.response
            raise RpcFailure(spec.descriptor(), injected=True)
        metadata = {
            INDEX_METADATA_KEY: indexing.encode(dei),
            PRELIMINARY_METADATA_KEY: "false",
        }
        return self._deliver(ctx, callee, method, args, metadata, dei)

    def _deliver(
        self,
        ctx: _HandlerCtx,
        callee: str,
        method: str,
        args: dict[str, Any],
        metadata: Mapping[str, str],
        dei: DistributedExecutionIndex,
    ) -> Any:
        try:
            value = self.handle(callee, method, args, metadata, ctx.lineage)
        except RpcFailure as failure:
            # The callee's unhandled downstream failure surfaces at this call
            # site as a failure of this RPC, with the same descriptor.
            self.record(
                kind="completion",
                caller=ctx.service.name,
                callee=callee,
                method=method,
                dei=dei,
                outcome=dict(failure.descriptor),
                lineage=ctx.lineage,
            )
            raise RpcFailure(dict(failure.descriptor)) from None
        except HandlerAbort as abort:
            descriptor = {"fault": abort.fault_type}
            self.record(
                kind="completion",
                caller=ctx.service.name,
                callee=callee,
                method=method,
                dei=dei,
                outcome=descriptor,
                lineage=ctx.lineage,
            )
            raise RpcFailure(dict(descriptor)) from None
        self.record(
            kind="completion",
            caller=ctx.service.name,
            callee=callee,
            method=method,
            dei=dei,
            outcome={"value": value},
            lineage=ctx.lineage,
        )
        return value

    # -- streams

    def open_stream(self, ctx: _HandlerCtx, stmt: OpenStream) -> _Stream:
        endpoint = self.app.endpoint(stmt.service, stmt.method)
        sig = Signature(stmt.service, stmt.method, endpoint.params)
        frames = ctx.frames + (
            (f"{ctx.service.source_file}:{stmt.line}", ctx.symbol),
        )
        stack = CallStackDigest.from_frames(frames, self.stack_policy)
        # A preliminary index deliberately pairs the signature with the empty
        # payload (the real payloads are unknown at open time), so it skips
        # the arity check a normal invocation signature gets.
        prelim_inv = InvocationSignature(signature=sig, payload=EMPTY_PAYLOAD, callstack=stack)
        id_path = ctx.path if self.config.include_path else EMPTY_INDEX
        id_inv = mask_invocation_signature(prelim_inv, self.config)
        self.detail_table[id_inv.digest_triple()] = id_inv
        if self.config.include_count:
            base_count, _ = self.counter.claim(id_path, id_inv, ctx.lineage)
        else:
            base_count = 1
        base_dei = _mark_last_preliminary(dei_extend(id_path, id_inv, base_count))
        stream = _Stream(
            callee=stmt.service,
            method=stmt.method,
            signature=sig,
            prelim_inv=id_inv,
            base_path=id_path,
            base_count=base_count,
            frames=frames,
        )
        ctx.streams.append(stream)
        self.record(
            kind="stream_opened",
            caller=ctx.service.name,
            callee=stmt.service,
            method=stmt.method,
            preliminary_dei=base_dei,
            lineage=ctx.lineage,
        )
        return stream

    def stream_send(
        self,
        ctx: _HandlerCtx,
        stream: _Stream,
        args: dict[str, Any],
        frames: tuple[tuple[str, str], ...],
    ) -> Any:
        with stream.lock:
            if not stream.open:
                raise StreamStateError(
                    f"send on closed stream to {stream.callee}.{stream.method}"
                )
            stream.in_flight += 1
        try:
            payload = InvocationPayload.from_mapping(stream.signature, args)
            stack = CallStackDigest.from_frames(frames, self.stack_policy)
            final_inv = make_invocation_signature(stream.signature, payload, stack)
            self.scheduler.pre_dispatch()
            final_dei = self.assign_index(ctx.path, final_inv, ctx.lineage)
            spec = self.plan.match(self.normalize(final_dei))
            if spec is not None:
                self.record(
                    kind="invocation",
                    caller=ctx.service.name,
                    callee=stream.callee,
                    method=stream.method,
                    dei=final_dei,
                    payload=tuple(args.items()),
                    lineage=ctx.lineage,
                )
                self.record(
                    kind="fault_injected",
                    caller=ctx.service.name,
                    callee=stream.callee,
                    method=stream.method,
                    dei=final_dei,
                    outcome=spec.descriptor(),
                    lineage=ctx.lineage,
                )
                if spec.mode == "response":
                    return spec.response
                raise RpcFailure(spec.descriptor(), injected=True)
            # The callee numbers delivered messages from the preliminary base;
            # claiming the same counter key on the caller side (atomically
            # with the ordinal) keeps the two views in lockstep and keeps
            # later streams at this site distinct.
            with stream.lock:
                stream.delivered += 1
                implicit_count = stream.base_count + stream.delivered
                if self.config.include_count:
                    mirrored, _ = self.counter.claim(
                        stream.base_path, stream.prelim_inv, ctx.lineage
                    )
                    if mirrored != implicit_count:
                        self.warn(
                            "stream counter drift between caller and callee at "
                            f"{stream.prelim_inv.render()}"
                        )
            implicit_dei = _mark_last_preliminary(
                dei_extend(stream.base_path, stream.prelim_inv, implicit_count)
            )
            with self._lock:
                self.rewrites[implicit_dei.key()] = final_dei
            with stream.lock:
                stream.pairs.append((implicit_dei, final_dei))
            self.record(
                kind="invocation",
                caller=ctx.service.name,
                callee=stream.callee,
                method=stream.method,
                dei=final_dei,
                preliminary_dei=implicit_dei,
                payload=tuple(args.items()),
                lineage=ctx.lineage,
            )
            metadata = {
                INDEX_METADATA_KEY: indexing.encode(implicit_dei),
                PRELIMINARY_METADATA_KEY: "true",
            }
            return self._deliver(ctx, stream.callee, stream.method, args, metadata, final_dei)
        finally:
            with stream.lock:
                stream.in_flight -= 1

    def finalize_stream(
        self, stream: _Stream
    ) -> dict[DistributedExecutionIndex, DistributedExecutionIndex]:
        with stream.lock:
            if stream.in_flight:
                raise StreamStateError(
                    f"stream to {stream.callee}.{stream.method} finalized with "
                    f"{stream.in_flight} send(s) outstanding"
                )
            stream.open = False
            pairs = list(stream.pairs)
        for implicit, final in pairs:
            self.record(
                kind="index_rewritten",
                caller="",
                callee=stream.callee,
                method=stream.method,
                dei=final,
                preliminary_dei=implicit,
            )
        return dict(pairs)

    # -- interpreter

    def eval_expr(self, ctx: _HandlerCtx, expr: Expr) -> Any:
        if isinstance(expr, Const):
            # Constants may be mutable (lists a program appends to); hand out
            # a copy so no state leaks between statements or executions.
            return copy.deepcopy(expr.value)
        if isinstance(expr, Var):
            if expr.name not in ctx.scope:
                raise HandlerAbort("service-error")
            return ctx.scope[expr.name]
        if isinstance(expr, Concat):
            return "".join(str(self.eval_expr(ctx, p)) for p in expr.parts)
        if isinstance(expr, Join):
            items = self.eval_expr(ctx, expr.items)
            return expr.sep.join(str(i) for i in items)
        if isinstance(expr, ListExpr):
            return [self.eval_expr(ctx, p) for p in expr.items]
        if isinstance(expr, First):
            items = self.eval_expr(ctx, expr.items)
            if not items:
                raise HandlerAbort("service-error")
            return items[0]
        if isinstance(expr, IsSet):
            return expr.name in ctx.scope
        if isinstance(expr, Not):
            return not self.eval_expr(ctx, expr.inner)
        if isinstance(expr, Eq):
            return self.eval_expr(ctx, expr.left) == self.eval_expr(ctx, expr.right)
        raise DexiError(f"unhandled expression {expr!r}")

    def exec_body(self, ctx: _HandlerCtx, body: tuple[Stmt, ...]) -> None:
        for stmt in body:
            self.exec_stmt(ctx, stmt)

    def exec_stmt(self, ctx: _HandlerCtx, stmt: Stmt) -> None:
        self.step()
        if isinstance(stmt, Assign):
            ctx.scope[stmt.var] = self.eval_expr(ctx, stmt.value)
        elif isinstance(stmt, Append):
            ctx.scope.setdefault(stmt.list_var, []).append(self.eval_expr(ctx, stmt.value))
        elif isinstance(stmt, Rpc):
            args = {name: self.eval_expr(ctx, expr) for name, expr in stmt.args}
            frames = ctx.frames + (
                (f"{ctx.service.source_file}:{stmt.line}", ctx.symbol),
            )
            value = self.invoke_rpc(ctx, stmt.service, stmt.method, args, frames)
            if stmt.assign:
                ctx.scope[stmt.assign] = value
        elif isinstance(stmt, CallHelper):
            helper = ctx.service.helpers[stmt.helper]
            args = {name: self.eval_expr(ctx, expr) for name, expr in stmt.args}
            frames = ctx.frames + (
                (f"{ctx.service.source_file}:{stmt.line}", ctx.symbol),
            )
            child = ctx.child(symbol=stmt.helper, scope=dict(args), frames=frames)
            value = self._run_callable(child, helper.body)
            if stmt.assign:
                ctx.scope[stmt.assign] = value
        elif isinstance(stmt, Loop):
            items = self.eval_expr(ctx, stmt.items)
            try:
                for item in items:
                    ctx.scope[stmt.var] = item
                    self.exec_body(ctx, stmt.body)
            except _BreakSignal:
                pass
        elif isinstance(stmt, If):
            branch = stmt.then if self.eval_expr(ctx, stmt.cond) else stmt.orelse
            self.exec_body(ctx, branch)
        elif isinstance(stmt, Try):
            try:
                self.exec_body(ctx, stmt.body)
            except RpcFailure:
                self.exec_body(ctx, stmt.catch)
        elif isinstance(stmt, Break):
            raise _BreakSignal()
        elif isinstance(stmt, Return):
            raise _ReturnSignal(self.eval_expr(ctx, stmt.value))
        elif isinstance(stmt, Raise):
            raise HandlerAbort(stmt.message)
        elif isinstance(stmt, Spawn):
            self._exec_spawn(ctx, stmt)
        elif isinstance(stmt, AwaitAll):
            self._exec_await(ctx, stmt)
        elif isinstance(stmt, OpenStream):
            ctx.scope[stmt.assign] = self.open_stream(ctx, stmt)
        elif isinstance(stmt, StreamSend):
            stream = ctx.scope.get(stmt.stream)
            if not isinstance(stream, _Stream):
                raise StreamStateError(f"variable {stmt.stream!r} is not an open stream")
            args = {name: self.eval_expr(ctx, expr) for name, expr in stmt.args}
            frames = ctx.frames + (
                (f"{ctx.service.source_file}:{stmt.line}", ctx.symbol),
            )
            value = self.stream_send(ctx, stream, args, frames)
            if stmt.assign:
                ctx.scope[stmt.assign] = value
        elif isinstance(stmt, CloseStream):
            stream = ctx.scope.get(stmt.stream)
            if not isinstance(stream, _Stream):
                raise StreamStateError(f"variable {stmt.stream!r} is not an open stream")
            self.finalize_stream(stream)
        else:
            raise DexiError(f"unhandled statement {stmt!r}")

    def _run_callable(self, ctx: _HandlerCtx, body: tuple[Stmt, ...]) -> Any:
        try:
            self.exec_body(ctx, body)
            return None
        except _ReturnSignal as ret:
            return ret.value

    def _exec_spawn(self, ctx: _HandlerCtx, stmt: Spawn) -> None:
        handles = ctx.scope.setdefault(stmt.futures, [])
        ordinal = len(handles)
        lineage = ctx.lineage + (ordinal,)
        # Concurrent blocks start on a fresh call stack, the way a task
        # handed to an executor would; the dispatch frame itself is
        # runtime-internal and is deny-listed out of the digest.
        frames = (("<runtime>/dispatch.py:0", "task_dispatch"),)
        scope_snapshot = dict(ctx.scope)
        block_ctx = ctx.child(scope=scope_snapshot, frames=frames, lineage=lineage)
        handle = self.scheduler.spawn(
            lambda: self._run_callable(block_ctx, stmt.body), depth=len(ctx.lineage)
        )
        handles.append(handle)

    def _exec_await(self, ctx: _HandlerCtx, stmt: AwaitAll) -> None:
        handles = ctx.scope.get(stmt.futures, [])
        self.scheduler.await_all(handles)
        results = []
        first_error: Exception | None = None
        for handle in handles:
            if handle.error is not None and first_error is None:
                first_error = handle.error
            results.append(handle.value)
        if first_error is not None:
            raise first_error
        if stmt.assign:
            ctx.scope[stmt.assign] = results


def _mark_last_preliminary(dei: DistributedExecutionIndex) -> DistributedExecutionIndex:
    entries = dei.entries[:-1] + (replace(dei.entries[-1], preliminary=True),)
    return DistributedExecutionIndex(entries)


def _apply_rewrites(
    dei: DistributedExecutionIndex,
    rewrites: Mapping[tuple, DistributedExecutionIndex],
    max_rounds: int = 64,
) -> DistributedExecutionIndex:
    for _ in range(max_rounds):
        changed = False
        for length in range(len(dei), 0, -1):
            prefix = DistributedExecutionIndex(dei.entries[:length])
            replacement = rewrites.get(prefix.key())
            if replacement is not None and replacement.key() != prefix.key():
                dei = DistributedExecutionIndex(replacement.entries + dei.entries[length:])
                changed = True
                break
        if not changed:
            return dei
    raise DexiError("stream rewrite did not converge")


def propagate_context(metadata: Mapping[str, str] | None) -> DistributedExecutionIndex:
    """Decode incoming metadata into the caller-supplied path.

    Absent metadata denotes the top-level entry point (the empty index).
    """
    if metadata is None or INDEX_METADATA_KEY not in metadata:
        return EMPTY_INDEX
    try:
        return indexing.decode(metadata[INDEX_METADATA_KEY])
    except indexing.DecodeError as exc:
        raise MetadataError(f"undecodable index metadata: {exc}") from exc


def _finalize_trace(
    execution: _Execution,
    raw_events: list[RpcEvent],
    entry: EntryRequest,
    entry_outcome: dict[str, Any],
    seed: int,
    mode: str,
) -> ExecutionTrace:
    rewrites = execution.rewrites

    def fix(dei: DistributedExecutionIndex | None) -> DistributedExecutionIndex | None:
        if dei is None:
            return None
        return _apply_rewrites(dei, rewrites)

    events = []
    for event in raw_events:
        if event.kind == "index_rewritten":
            events.append(event)  # the rewrite log keeps its preliminary side
            continue
        fixed = replace(event, dei=fix(event.dei))
        events.append(fixed)
    trace = ExecutionTrace(
        events=tuple(events),
        entry_request=entry,
        entry_outcome=entry_outcome,
        seed=seed,
        scheduler_mode=mode,
        config=execution.config,
        warnings=tuple(execution.warnings),
    )
    for event in trace.events:
        if event.kind in ("invocation", "completion", "fault_injected") and event.dei is not None:
            if event.dei.has_preliminary():
                raise DexiError(
                    f"preliminary index survived finalization: {event.dei.render()}"
                )
    if execution.config.is_full:
        seen: set[tuple] = set()
        for dei in trace.invocation_deis():
            key = dei.key()
            if key in seen:
                raise DexiError(f"duplicate full index within one trace: {dei.render()}")
            seen.add(key)
    return trace


def run_execution(
    app: Application,
    entry: EntryRequest,
    plan: FaultPlan | None = None,
    *,
    seed: int = 0,
    config: InstantiationConfig = FULL_CONFIG,
    scheduler: str = "virtual",
    pool_size: int = 2,
    budget: int = DEFAULT_STEP_BUDGET,
    stack_policy: CallStackPolicy = DEFAULT_STACK_POLICY,
) -> ExecutionTrace:
    """Execute one entry request against the application and finalize the trace.

    At each RPC the callee path is the caller's received index, the count
    comes from the shared per-execution counter, and the fault plan is
    consulted before delivery. The returned trace has every preliminary stream
    index rewritten to its final form.
    """
    traces = run_sequence(
        app,
        [entry],
        plan,
        seed=seed,
        config=config,
        scheduler=scheduler,
        pool_size=pool_size,
        budget=budget,
        stack_policy=stack_policy,
    )
    return traces[0]


def run_sequence(
    app: Application,
    entries: Iterable[EntryRequest],
    plan: FaultPlan | None = None,
    *,
    seed: int = 0,
    config: InstantiationConfig = FULL_CONFIG,
    scheduler: str = "virtual",
    pool_size: int = 2,
    budget: int = DEFAULT_STEP_BUDGET,
    stack_policy: CallStackPolicy = DEFAULT_STACK_POLICY,
) -> list[ExecutionTrace]:
    """Run several entry requests sharing one counter state (one functional test)."""
    plan = plan if plan is not None else EMPTY_PLAN
    sched = _make_scheduler(scheduler, seed, pool_size)
    execution = _Execution(
        app=app,
        plan=plan,
        config=config,
        scheduler=sched,
        seed=seed,
        budget=budget,
        stack_policy=stack_policy,
    )
    traces = []
    try:
        for entry in entries:
            start = len(execution.events)
            outcome = execution.dispatch_entry(entry)
            sched.drain()
            window = execution.events[start:]
            traces.append(_finalize_trace(execution, window, entry, outcome, seed, sched.mode))
    finally:
        sched.close()
    return traces
