"""One shard process: in-memory keyspace, wire endpoint, inference queue.

A shard owns a contiguous slot range. Tensor/dataset keys are slot-checked
(hash-tag aware, so tagged temporaries land here when their tag does);
models and scripts are stored locally on every shard regardless of their
name's slot, because clients broadcast them.

Threading layout: one accept loop, one thread per connection, and a small
pool of inference workers (one by default) draining a shared execution
queue. Handlers block on their queued job and reply only after outputs are
stored, so RUN_MODEL/RUN_SCRIPT are blocking RPCs. The keyspace lock is
held only for dict operations, never across I/O or execution.
"""

from __future__ import annotations

import argparse
import collections
import socket
import threading
from dataclasses import dataclass, field

import numpy as np

from . import engine, errors, protocol, tensors
from .protocol import Command, Status
from .routing import ClusterTopology, key_slot

EXEC_TIMEOUT = 120.0

KIND_TENSOR = "tensor"
KIND_DATASET = "dataset"
KIND_MODEL = "model"
KIND_SCRIPT = "script"


@dataclass
class _ModelRecord:
    spec: engine.ModelSpec


@dataclass
class _ScriptRecord:
    spec: engine.ScriptSpec
    blob: bytes


class ShardStats:
    """Monotonic counters plus the keys_resident gauge."""

    COUNTERS = (
        "puts",
        "gets",
        "model_runs",
        "script_runs",
        "batch_executions",
        "bytes_in",
        "bytes_out",
    )

    def __init__(self):
        self._lock = threading.Lock()
        self._values = {name: 0 for name in self.COUNTERS}

    def add(self, name: str, amount: int = 1) -> None:
        with self._lock:
            self._values[name] += amount

    def snapshot(self, keys_resident: int) -> dict[str, int]:
        with self._lock:
            snap = dict(self._values)
        snap["keys_resident"] = keys_resident
        return snap


@dataclass
class _ExecJob:
    kind: str  # "model" | "script"
    name: str
    output_keys: list[str]
    block: np.ndarray | None = None  # model input rows, f32 [N, width]
    row_counts: list[int] = field(default_factory=list)
    arrays: list[np.ndarray] = field(default_factory=list)  # script inputs
    done: threading.Event = field(default_factory=threading.Event)
    error: Exception | None = None


class ShardServer:
    def __init__(
        self,
        listen: str,
        shard_id: int,
        topology: ClusterTopology,
        workers: int = 1,
    ):
        self.shard_id = shard_id
        self.topology = topology
        self.me = topology.shard(shard_id)
        host, _, port = listen.rpartition(":")
        self._listen_addr = (host or "127.0.0.1", int(port))
        self.stats = ShardStats()
        self._entries: dict[str, tuple[str, object]] = {}
        self._keyspace_lock = threading.Lock()
        self._queue: collections.deque[_ExecJob] = collections.deque()
        self._queue_cond = threading.Condition()
        self._n_workers = max(1, workers)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._sock: socket.socket | None = None

    # --- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind(self._listen_addr)
        except OSError as e:
            sock.close()
            raise errors.PortInUse(f"cannot bind {self._listen_addr}: {e}") from None
        sock.listen(128)
        self._sock = sock
        for i in range(self._n_workers):
            t = threading.Thread(target=self._worker_loop, name=f"worker-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        t = threading.Thread(target=self._accept_loop, name="accept", daemon=True)
        t.start()
        self._threads.append(t)

    @property
    def port(self) -> int:
        assert self._sock is not None
        return self._sock.getsockname()[1]

    def stop(self) -> None:
        self._stop.set()
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.close()
            except OSError:
                pass
        with self._queue_cond:
            self._queue_cond.notify_all()

    def serve_forever(self) -> None:
        self.start()
        try:
            self._stop.wait()
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # --- network loops -------------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._sock is not None
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._conns_lock:
                self._conns.add(conn)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()

    def _serve_conn(self, conn: socket.socket) -> None:
        try:
            while not self._stop.is_set():
                try:
                    frame = protocol.read_frame(conn)
                except (ConnectionError, errors.ProtocolError, OSError):
                    return
                self.stats.add("bytes_in", 4 + len(frame))
                response = self._dispatch(frame)
                self.stats.add("bytes_out", len(response))
                try:
                    conn.sendall(response)
                except OSError:
                    return
        finally:
            with self._conns_lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass

    def _dispatch(self, frame: bytes) -> bytes:
        version, command, request_id, body = protocol.parse_request(frame)
        if version != protocol.VERSION:
            exc = errors.Malformed(f"unsupported protocol version {version}")
            return protocol.pack_error_response(command, request_id, exc)
        try:
            cmd = Command(command)
        except ValueError:
            exc = errors.Malformed(f"unknown command 0x{command:02x}")
            return protocol.pack_error_response(command, request_id, exc)
        try:
            payload = self._handle(cmd, body)
            return protocol.pack_response(cmd, request_id, Status.OK, payload)
        except errors.TensorGridError as e:
            return protocol.pack_error_response(cmd, request_id, e)
        except Exception as e:  # defensive: never kill the connection thread
            wrapped = errors.ExecError(f"internal error: {type(e).__name__}: {e}")
            return protocol.pack_error_response(cmd, request_id, wrapped)

    # --- keyspace helpers ------------------------------------------------------

    def _check_owned(self, key: str) -> None:
        try:
            slot = key_slot(key)
        except errors.EmptyKey as e:
            raise errors.Malformed(str(e)) from None
        owner = self.topology.slot_owner(slot)
        if owner != self.shard_id:
            raise errors.WrongShard(
                protocol.wrong_shard_payload(owner, slot, key), owner=owner, slot=slot
            )

    def _store(self, key: str, kind: str, value: object) -> None:
        with self._keyspace_lock:
            self._entries[key] = (kind, value)

    def _load(self, key: str) -> tuple[str, object] | None:
        with self._keyspace_lock:
            return self._entries.get(key)

    def _keys_resident(self) -> int:
        with self._keyspace_lock:
            return len(self._entries)

    # --- command handlers ---------------------------------------------------

    def _handle(self, cmd: Command, body: bytes) -> bytes:
        if cmd == Command.PING:
            return b""
        if cmd == Command.CLUSTER_SLOTS:
            return protocol.pack_topology(self.topology)
        if cmd == Command.INFO:
            return protocol.pack_counters(self.stats.snapshot(self._keys_resident()))
        if cmd == Command.PUT_TENSOR:
            return self._handle_put(body, KIND_TENSOR)
        if cmd == Command.GET_TENSOR:
            return self._handle_get(body, KIND_TENSOR)
        if cmd == Command.PUT_DATASET:
            return self._handle_put(body, KIND_DATASET)
        if cmd == Command.GET_DATASET:
            return self._handle_get(body, KIND_DATASET)
        if cmd == Command.DEL:
            return self._handle_del(body)
        if cmd == Command.SET_MODEL:
            return self._handle_set_model(body)
        if cmd == Command.SET_SCRIPT:
            return self._handle_set_script(body)
        if cmd == Command.RUN_MODEL:
            return self._handle_run_model(body)
        if cmd == Command.RUN_SCRIPT:
            return self._handle_run_script(body)
        raise errors.Malformed(f"unhandled command {cmd}")

    def _handle_put(self, body: bytes, kind: str) -> bytes:
        try:
            key, off = protocol.unpack_str(body, 0)
        except errors.ProtocolError as e:
            raise errors.Malformed(str(e)) from None
        self._check_owned(key)
        blob = bytes(body[off:])
        try:
            if kind == KIND_TENSOR:
                tensors.deserialize_tensor(blob)
            else:
                tensors.deserialize_dataset(key, blob)
        except errors.TensorGridError as e:
            raise errors.Malformed(f"{type(e).__name__}: {e}") from None
        self._store(key, kind, blob)
        self.stats.add("puts")
        return b""

    def _handle_get(self, body: bytes, kind: str) -> bytes:
        try:
            key, _ = protocol.unpack_str(body, 0)
        except errors.ProtocolError as e:
            raise errors.Malformed(str(e)) from None
        self._check_owned(key)
        entry = self._load(key)
        if entry is None:
            raise errors.NotFound(f"key {key!r} not found")
        found_kind, value = entry
        if found_kind != kind:
            raise errors.WrongKind(f"key {key!r} holds a {found_kind}, not a {kind}")
        self.stats.add("gets")
        return value  # type: ignore[return-value]

    def _handle_del(self, body: bytes) -> bytes:
        try:
            key, _ = protocol.unpack_str(body, 0)
        except errors.ProtocolError as e:
            raise errors.Malformed(str(e)) from None
        self._check_owned(key)
        with self._keyspace_lock:
            self._entries.pop(key, None)
        return b""

    def _handle_set_model(self, body: bytes) -> bytes:
        try:
            name, off = protocol.unpack_str(body, 0)
            if len(body) - off < 4:
                raise errors.ProtocolError("batch size truncated")
            batch_size = int.from_bytes(body[off : off + 4], "little")
            off += 4
            device, off = protocol.unpack_str(body, off)
        except errors.ProtocolError as e:
            raise errors.Malformed(str(e)) from None
        blob = bytes(body[off:])
        try:
            spec = engine.load_model(blob)
        except errors.TensorGridError as e:
            raise errors.BadModel(f"{type(e).__name__}: {e}") from None
        if batch_size < 1:
            raise errors.BadModel(f"batch size must be >= 1, got {batch_size}")
        bound = spec.with_binding(name, batch_size, device or "cpu")
        self._store(name, KIND_MODEL, _ModelRecord(bound))
        return b""

    def _handle_set_script(self, body: bytes) -> bytes:
        try:
            name, off = protocol.unpack_str(body, 0)
        except errors.ProtocolError as e:
            raise errors.Malformed(str(e)) from None
        blob = bytes(body[off:])
        try:
            spec = engine.parse_script(blob)
        except errors.TensorGridError as e:
            raise errors.Malformed(f"{type(e).__name__}: {e}") from None
        self._store(name, KIND_SCRIPT, _ScriptRecord(spec, blob))
        return b""

    def _resolve_input(self, key: str) -> np.ndarray:
        entry = self._load(key)
        if entry is None:
            raise errors.InputMissing(f"input key {key!r} not resident on shard {self.shard_id}")
        kind, value = entry
        if kind != KIND_TENSOR:
            raise errors.WrongKind(f"input key {key!r} holds a {kind}, not a tensor")
        return tensors.deserialize_tensor(value).to_numpy()  # type: ignore[arg-type]

    def _store_output(self, key: str, arr: np.ndarray) -> None:
        blob = tensors.serialize_tensor(tensors.tensor_from_array(arr))
        self._store(key, KIND_TENSOR, blob)

    def _handle_run_model(self, body: bytes) -> bytes:
        try:
            name, off = protocol.unpack_str(body, 0)
            input_keys, off = protocol.unpack_key_list(body, off)
            output_keys, off = protocol.unpack_key_list(body, off)
        except errors.ProtocolError as e:
            raise errors.Malformed(str(e)) from None
        if not input_keys:
            raise errors.Malformed("RUN_MODEL needs at least one input key")
        if len(output_keys) not in (1, len(input_keys)):
            raise errors.Malformed(
                f"RUN_MODEL takes 1 or {len(input_keys)} output keys, got {len(output_keys)}"
            )
        record = self._load(name)
        if record is None or record[0] != KIND_MODEL:
            raise errors.ModelNotFound(f"no model named {name!r} on shard {self.shard_id}")
        spec = record[1].spec  # type: ignore[union-attr]
        rows: list[np.ndarray] = []
        row_counts: list[int] = []
        for key in input_keys:
            arr = self._resolve_input(key)
            if arr.dtype != np.float32:
                raise errors.ExecError(f"input {key!r} must be float32, got {arr.dtype}")
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            if arr.ndim != 2:
                raise errors.ExecError(f"input {key!r} must be 1-D or 2-D rows")
            width = spec.input_width
            if width is not None and arr.shape[1] != width:
                raise errors.ExecError(
                    f"WidthMismatch: input {key!r} width {arr.shape[1]}, model wants {width}"
                )
            rows.append(arr)
            row_counts.append(arr.shape[0])
        widths = {a.shape[1] for a in rows}
        if len(widths) != 1:
            raise errors.ExecError(f"WidthMismatch: inputs disagree on width: {sorted(widths)}")
        block = np.concatenate(rows, axis=0) if len(rows) > 1 else rows[0]
        job = _ExecJob(
            kind="model",
            name=name,
            output_keys=list(output_keys),
            block=np.ascontiguousarray(block, dtype=np.float32),
            row_counts=row_counts,
        )
        self._submit(job)
        return b""

    def _handle_run_script(self, body: bytes) -> bytes:
        try:
            name, off = protocol.unpack_str(body, 0)
            input_keys, off = protocol.unpack_key_list(body, off)
            output_key, off = protocol.unpack_str(body, off)
        except errors.ProtocolError as e:
            raise errors.Malformed(str(e)) from None
        record = self._load(name)
        if record is None or record[0] != KIND_SCRIPT:
            raise errors.NotFound(f"no script named {name!r} on shard {self.shard_id}")
        arrays = [self._resolve_input(k) for k in input_keys]
        job = _ExecJob(kind="script", name=name, output_keys=[output_key], arrays=arrays)
        self._submit(job)
        return b""

    def _submit(self, job: _ExecJob) -> None:
        with self._queue_cond:
            self._queue.append(job)
            self._queue_cond.notify()
        if not job.done.wait(EXEC_TIMEOUT):
            raise errors.ExecError(f"execution of {job.name!r} timed out")
        if job.error is not None:
            raise job.error

    # --- inference worker ---------------------------------------------------

    def _worker_loop(self) -> None:
        while True:
            with self._queue_cond:
                while not self._queue and not self._stop.is_set():
                    self._queue_cond.wait(0.5)
                if self._stop.is_set():
                    return
                head = self._queue.popleft()
                if head.kind == "script":
                    batch = [head]
                else:
                    batch = self._collect_model_batch(head)
            if head.kind == "script":
                self._exec_script(head)
            else:
                self._exec_model_batch(batch)

    def _collect_model_batch(self, head: _ExecJob) -> list[_ExecJob]:
        """Opportunistic drain: take whatever same-model jobs are pending, up
        to the model's batch size; never waits for more. Caller holds the
        queue lock."""
        record = self._load(head.name)
        limit = record[1].spec.batch_size if record and record[0] == KIND_MODEL else 1
        batch = [head]
        if limit > 1:
            keep: collections.deque[_ExecJob] = collections.deque()
            while self._queue and len(batch) < limit:
                job = self._queue.popleft()
                if job.kind == "model" and job.name == head.name:
                    batch.append(job)
                else:
                    keep.append(job)
            keep.extend(self._queue)
            self._queue = keep
        return batch

    def _exec_model_batch(self, batch: list[_ExecJob]) -> None:
        record = self._load(batch[0].name)
        if record is None or record[0] != KIND_MODEL:
            exc = errors.ModelNotFound(f"model {batch[0].name!r} vanished before execution")
            for job in batch:
                job.error = exc
                job.done.set()
            return
        spec = record[1].spec  # type: ignore[union-attr]
        blocks = [job.block for job in batch]
        big = np.concatenate(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        try:
            out = engine.run_model_exec(spec, big)
        except errors.TensorGridError as e:
            exc = errors.ExecError(f"{type(e).__name__}: {e}")
            for job in batch:
                job.error = exc
                job.done.set()
            return
        cursor = 0
        for job in batch:
            n = sum(job.row_counts)
            job_out = out[cursor : cursor + n]
            cursor += n
            try:
                if len(job.output_keys) == 1:
                    self._store_output(job.output_keys[0], job_out)
                else:
                    at = 0
                    for key, rows in zip(job.output_keys, job.row_counts):
                        self._store_output(key, job_out[at : at + rows])
                        at += rows
            except errors.TensorGridError as e:
                job.error = errors.ExecError(f"storing outputs failed: {e}")
            job.done.set()
        self.stats.add("model_runs", len(batch))
        self.stats.add("batch_executions")

    def _exec_script(self, job: _ExecJob) -> None:
        record = self._load(job.name)
        if record is None or record[0] != KIND_SCRIPT:
            job.error = errors.NotFound(f"script {job.name!r} vanished before execution")
            job.done.set()
            return
        spec = record[1].spec  # type: ignore[union-attr]
        try:
            out = engine.run_script_exec(spec, job.arrays)
        except errors.TensorGridError as e:
            job.error = errors.ExecError(f"{type(e).__name__}: {e}")
            job.done.set()
            return
        self._store_output(job.output_keys[0], out)
        self.stats.add("script_runs")
        job.done.set()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tensorgrid-shard", description="Run one shard server.")
    parser.add_argument("--listen", required=True, help="host:port to listen on")
    parser.add_argument("--shard-id", type=int, required=True)
    parser.add_argument("--topology", required=True, help="path to the topology JSON file")
    parser.add_argument("--workers", type=int, default=1, help="inference worker threads")
    args = parser.parse_args(argv)
    topology = ClusterTopology.load(args.topology)
    server = ShardServer(args.listen, args.shard_id, topology, workers=args.workers)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
