"""Embedded client: routes keys to shards and hides data movement.

A Client is single-owner: one handle per worker, never shared between
threads. Connections to shards open lazily. Data keys are routed through
the hash-slot map; models and scripts are broadcast to every shard, so
their names bypass routing.

Cross-shard execution contract: the executing shard is the owner of the
first input key. Inputs living elsewhere are staged under hash-tagged
temporary keys that route to the executing shard; outputs whose canonical
slot is elsewhere are produced under temporaries and then moved to their
owners. Temporaries are deleted even on error paths, so a failed run never
leaks keys.
"""

from __future__ import annotations

import socket
import time
import uuid
from collections import Counter

import numpy as np

from . import errors, protocol, tensors
from .protocol import Command, Status
from .routing import tag_for_slot
from .tensors import Dataset, Tensor

CONNECT_TIMEOUT = 5.0
IO_TIMEOUT = 150.0


class _Conn:
    def __init__(self, address: str):
        host, _, port = address.rpartition(":")
        try:
            self.sock = socket.create_connection((host, int(port)), timeout=CONNECT_TIMEOUT)
        except OSError as e:
            raise errors.Unreachable(f"cannot reach shard at {address}: {e}") from None
        self.sock.settimeout(IO_TIMEOUT)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.address = address
        self._next_id = 1

    def request(self, command: Command, body: bytes = b"") -> bytes:
        """Send one request and return the OK payload; raises mapped errors."""
        request_id = self._next_id
        self._next_id += 1
        try:
            self.sock.sendall(protocol.pack_request(command, request_id, body))
            frame = protocol.read_frame(self.sock)
        except (OSError, ConnectionError) as e:
            raise errors.Unreachable(f"shard {self.address} dropped: {e}") from None
        version, rcommand, rid, status, payload = protocol.parse_response(frame)
        if version != protocol.VERSION:
            raise errors.ProtocolVersionMismatch(
                f"shard {self.address} speaks version {version}, expected {protocol.VERSION}"
            )
        if rid != request_id or rcommand != int(command):
            raise errors.ProtocolError(
                f"response mismatch: sent ({int(command)}, {request_id}), got ({rcommand}, {rid})"
            )
        if status != Status.OK:
            raise protocol.error_for_status(status, payload.decode("utf-8", "replace"))
        return payload

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class Client:
    """Synchronous cluster client; see connect()."""

    def __init__(self, seed_address: str, key_prefix: str = ""):
        self.key_prefix = key_prefix
        self.sent: Counter[Command] = Counter()  # frames sent per command
        self.temp_puts = 0  # staged input copies
        self.temp_gets = 0  # staged output fetches
        self._conns: dict[int, _Conn] = {}
        seed = _Conn(seed_address)
        seed.request(Command.PING)
        topo_bytes = seed.request(Command.CLUSTER_SLOTS)
        self.topology, _ = protocol.unpack_topology(topo_bytes)
        for s in self.topology.shards:
            if s.address == seed_address:
                self._conns[s.shard_id] = seed
                break
        else:
            seed.close()

    # --- plumbing -------------------------------------------------------------

    def close(self) -> None:
        for conn in self._conns.values():
            conn.close()
        self._conns.clear()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _conn(self, shard_id: int) -> _Conn:
        conn = self._conns.get(shard_id)
        if conn is None:
            conn = _Conn(self.topology.shard(shard_id).address)
            self._conns[shard_id] = conn
        return conn

    def _key(self, name: str) -> str:
        return self.key_prefix + name

    def _refetch_topology(self) -> None:
        for shard_id in list(self._conns):
            try:
                raw = self._conns[shard_id].request(Command.CLUSTER_SLOTS)
            except errors.TensorGridError:
                continue
            self.topology, _ = protocol.unpack_topology(raw)
            # drop cached connections that no longer match their shard's address
            for sid in list(self._conns):
                try:
                    expected = self.topology.shard(sid).address
                except errors.BadTopology:
                    expected = None
                if self._conns[sid].address != expected:
                    self._conns.pop(sid).close()
            return
        raise errors.Unreachable("no shard answered a topology refresh")

    def _keyed_request(self, key: str, command: Command, body: bytes) -> bytes:
        """Route by key slot; on WrongShard refresh the topology and retry once."""
        shard_id = self.topology.key_owner(key)
        self.sent[command] += 1
        try:
            return self._conn(shard_id).request(command, body)
        except errors.WrongShard:
            self._refetch_topology()
            self.sent[command] += 1
            return self._conn(self.topology.key_owner(key)).request(command, body)

    def _shard_request(self, shard_id: int, command: Command, body: bytes = b"") -> bytes:
        self.sent[command] += 1
        return self._conn(shard_id).request(command, body)

    # --- tensors and datasets ---------------------------------------------------

    def put_tensor(self, name: str, value: Tensor | np.ndarray) -> None:
        t = value if isinstance(value, Tensor) else tensors.tensor_from_array(value)
        key = self._key(name)
        body = protocol.pack_str(key) + tensors.serialize_tensor(t)
        self._keyed_request(key, Command.PUT_TENSOR, body)

    def get_tensor(self, name: str) -> Tensor:
        key = self._key(name)
        raw = self._keyed_request(key, Command.GET_TENSOR, protocol.pack_str(key))
        return tensors.deserialize_tensor(raw)

    def delete(self, name: str) -> None:
        key = self._key(name)
        self._keyed_request(key, Command.DEL, protocol.pack_str(key))

    def put_dataset(self, ds: Dataset) -> None:
        key = self._key(ds.name)
        body = protocol.pack_str(key) + tensors.serialize_dataset(ds)
        self._keyed_request(key, Command.PUT_DATASET, body)

    def get_dataset(self, name: str) -> Dataset:
        key = self._key(name)
        raw = self._keyed_request(key, Command.GET_DATASET, protocol.pack_str(key))
        return tensors.deserialize_dataset(name, raw)

    def tensor_exists(self, name: str) -> bool:
        try:
            self.get_tensor(name)
            return True
        except (errors.NotFound, errors.WrongKind):
            return False

    def poll_tensor(self, name: str, interval: float, tries: int) -> bool:
        for attempt in range(tries):
            if self.tensor_exists(name):
                return True
            if attempt < tries - 1:
                time.sleep(interval)
        return False

    # --- models and scripts -----------------------------------------------------

    def set_model(
        self, name: str, blob: bytes, batch_size: int = 1, device: str = "cpu"
    ) -> None:
        """Broadcast the model to every shard; all must ack."""
        body = (
            protocol.pack_str(name)
            + int(batch_size).to_bytes(4, "little")
            + protocol.pack_str(device)
            + blob
        )
        self._broadcast(Command.SET_MODEL, body, f"set_model({name!r})")

    def set_script(self, name: str, blob: bytes) -> None:
        """Broadcast the script to every shard; all must ack."""
        body = protocol.pack_str(name) + blob
        self._broadcast(Command.SET_SCRIPT, body, f"set_script({name!r})")

    def _broadcast(self, command: Command, body: bytes, what: str) -> None:
        failed: dict[int, Exception] = {}
        for s in self.topology.shards:
            try:
                self._shard_request(s.shard_id, command, body)
            except (errors.BadModel, errors.Malformed):
                # every shard rejects the same blob; surface the validation error
                raise
            except errors.TensorGridError as e:
                failed[s.shard_id] = e
        if failed:
            raise errors.PartialBroadcast(
                f"{what} reached {len(self.topology.shards) - len(failed)}"
                f"/{len(self.topology.shards)} shards; failed: {sorted(failed)}",
                failed=failed,
            )

    def run_model(self, name: str, input_names: list[str], output_names: list[str]) -> None:
        input_keys = [self._key(n) for n in input_names]
        output_keys = [self._key(n) for n in output_names]
        self._run(Command.RUN_MODEL, name, input_keys, output_keys, multi_output=True)

    def run_script(self, name: str, input_names: list[str], output_name: str) -> None:
        input_keys = [self._key(n) for n in input_names]
        self._run(Command.RUN_SCRIPT, name, input_keys, [self._key(output_name)], multi_output=False)

    def _run(
        self,
        command: Command,
        name: str,
        input_keys: list[str],
        output_keys: list[str],
        multi_output: bool,
    ) -> None:
        if not input_keys:
            raise errors.Malformed("need at least one input key")
        exec_shard = self.topology.key_owner(input_keys[0])
        tag = tag_for_slot(self.topology.shard(exec_shard).slot_lo)
        nonce = uuid.uuid4().hex[:8]
        temps: list[str] = []
        try:
            staged_inputs = []
            for i, key in enumerate(input_keys):
                if self.topology.key_owner(key) == exec_shard:
                    staged_inputs.append(key)
                    continue
                raw = self._keyed_request(key, Command.GET_TENSOR, protocol.pack_str(key))
                tkey = "{%s}tmp.%s.in.%d" % (tag, nonce, i)
                body = protocol.pack_str(tkey) + raw
                self._shard_request(exec_shard, Command.PUT_TENSOR, body)
                temps.append(tkey)
                staged_inputs.append(tkey)
                self.temp_puts += 1
            staged_outputs = []
            moves: list[tuple[str, str]] = []  # (temporary, canonical)
            for j, key in enumerate(output_keys):
                if self.topology.key_owner(key) == exec_shard:
                    staged_outputs.append(key)
                    continue
                tkey = "{%s}tmp.%s.out.%d" % (tag, nonce, j)
                staged_outputs.append(tkey)
                temps.append(tkey)
                moves.append((tkey, key))
            body = protocol.pack_str(name) + protocol.pack_key_list(staged_inputs)
            if multi_output:
                body += protocol.pack_key_list(staged_outputs)
            else:
                body += protocol.pack_str(staged_outputs[0])
            self._shard_request(exec_shard, command, body)
            for tkey, key in moves:
                raw = self._shard_request(exec_shard, Command.GET_TENSOR, protocol.pack_str(tkey))
                self.temp_gets += 1
                self._keyed_request(key, Command.PUT_TENSOR, protocol.pack_str(key) + raw)
        finally:
            for tkey in temps:
                try:
                    self._shard_request(exec_shard, Command.DEL, protocol.pack_str(tkey))
                except errors.TensorGridError:
                    pass

    # --- cluster introspection ----------------------------------------------------

    def ping(self, shard_id: int = 0) -> None:
        self._shard_request(shard_id, Command.PING)

    def info(self, shard_id: int) -> dict[str, int]:
        raw = self._shard_request(shard_id, Command.INFO)
        counters, _ = protocol.unpack_counters(raw)
        return counters

    def cluster_info(self) -> dict[int, dict[str, int]]:
        return {s.shard_id: self.info(s.shard_id) for s in self.topology.shards}


def connect(seed_address: str, key_prefix: str = "") -> Client:
    """Open a handle. Any one live shard suffices; the full topology comes
    back over CLUSTER_SLOTS."""
    return Client(seed_address, key_prefix=key_prefix)
