"""Golden wire-protocol frames for cross-language conformance.

Every client implementation must produce and parse these frames
byte-identically. The manifest describes each frame in semantic terms
(keys, tensors, topology, ...) so a client test suite can rebuild the
frame with its own encoder and compare against the checked-in bytes.

Regenerate with:  python -m tensorgrid.golden protocol/golden
"""

from __future__ import annotations

import base64
import json
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

from . import protocol
from .engine import Dense, ModelSpec, ScriptSpec, Step, dump_model, dump_script
from .protocol import Command, Status
from .routing import ClusterTopology, crc16, plan_topology
from .tensors import DType, make_tensor, serialize_tensor


@dataclass(frozen=True)
class GoldenFrame:
    name: str
    data: bytes
    entry: dict


def _tensor_entry(dtype: DType, shape: list[int], data: bytes) -> dict:
    return {
        "dtype": dtype.name,
        "shape": shape,
        "data_b64": base64.b64encode(data).decode("ascii"),
    }


def _tensor_bytes(entry: dict) -> bytes:
    t = make_tensor(DType[entry["dtype"]], entry["shape"], base64.b64decode(entry["data_b64"]))
    return serialize_tensor(t)


def _topology() -> ClusterTopology:
    return plan_topology(4, [f"127.0.0.1:{7000 + i}" for i in range(4)])


def build_frames() -> list[GoldenFrame]:
    frames: list[GoldenFrame] = []

    def add_request(name: str, command: Command, request_id: int, body: bytes, entry_body: dict):
        frames.append(
            GoldenFrame(
                name,
                protocol.pack_request(command, request_id, body),
                {
                    "kind": "request",
                    "command": command.name,
                    "request_id": request_id,
                    "body": entry_body,
                },
            )
        )

    def add_response(
        name: str, command: Command, request_id: int, status: Status, payload: bytes, entry_payload: dict
    ):
        frames.append(
            GoldenFrame(
                name,
                protocol.pack_response(command, request_id, status, payload),
                {
                    "kind": "response",
                    "command": command.name,
                    "request_id": request_id,
                    "status": int(status),
                    "payload": entry_payload,
                },
            )
        )

    add_request("ping_request", Command.PING, 1, b"", {"type": "empty"})
    add_response("ping_response", Command.PING, 1, Status.OK, b"", {"type": "empty"})

    f32 = _tensor_entry(
        DType.f32, [2, 2], struct.pack("<4f", 1.5, -2.0, 3.25, 0.0)
    )
    add_request(
        "put_tensor_f32_request",
        Command.PUT_TENSOR,
        2,
        protocol.pack_str("{job1}.a") + _tensor_bytes(f32),
        {"type": "put_tensor", "key": "{job1}.a", "tensor": f32},
    )
    add_response("put_tensor_ok_response", Command.PUT_TENSOR, 2, Status.OK, b"", {"type": "empty"})

    add_request(
        "get_tensor_request",
        Command.GET_TENSOR,
        3,
        protocol.pack_str("{job1}.a"),
        {"type": "key", "key": "{job1}.a"},
    )
    add_response(
        "get_tensor_response",
        Command.GET_TENSOR,
        3,
        Status.OK,
        _tensor_bytes(f32),
        {"type": "tensor", "tensor": f32},
    )

    missing = "NotFound: key 'nope' not found"
    add_response(
        "not_found_response",
        Command.GET_TENSOR,
        4,
        Status.NOT_FOUND,
        missing.encode("utf-8"),
        {"type": "error", "message": missing},
    )

    foo_slot = crc16(b"foo") % 16384
    owner = _topology().slot_owner(foo_slot)
    wrong = protocol.wrong_shard_payload(owner, foo_slot, "foo")
    add_response(
        "wrong_shard_response",
        Command.PUT_TENSOR,
        5,
        Status.WRONG_SHARD,
        wrong.encode("utf-8"),
        {"type": "error", "message": wrong, "owner": owner, "slot": foo_slot},
    )

    add_request(
        "del_request",
        Command.DEL,
        6,
        protocol.pack_str("{t1}tmp.cafe0123.in.0"),
        {"type": "key", "key": "{t1}tmp.cafe0123.in.0"},
    )

    model_blob = dump_model(
        ModelSpec("", (Dense(1, 1, [[2.0]], [1.0]),))
    )
    add_request(
        "set_model_request",
        Command.SET_MODEL,
        7,
        protocol.pack_str("m")
        + (10_000).to_bytes(4, "little")
        + protocol.pack_str("cpu")
        + model_blob,
        {
            "type": "set_model",
            "name": "m",
            "batch_size": 10_000,
            "device": "cpu",
            "blob_b64": base64.b64encode(model_blob).decode("ascii"),
        },
    )

    add_request(
        "run_model_request",
        Command.RUN_MODEL,
        8,
        protocol.pack_str("m")
        + protocol.pack_key_list(["{a}x", "{a}y"])
        + protocol.pack_key_list(["{a}out"]),
        {"type": "run_model", "name": "m", "inputs": ["{a}x", "{a}y"], "outputs": ["{a}out"]},
    )

    script_blob = dump_script(
        ScriptSpec("s", 1, (Step(0, "affine", {"a": 2.0, "b": 1.0}),), "single")
    )
    add_request(
        "set_script_request",
        Command.SET_SCRIPT,
        9,
        protocol.pack_str("s") + script_blob,
        {
            "type": "set_script",
            "name": "s",
            "blob_b64": base64.b64encode(script_blob).decode("ascii"),
        },
    )

    add_request(
        "run_script_request",
        Command.RUN_SCRIPT,
        10,
        protocol.pack_str("s") + protocol.pack_key_list(["{a}x"]) + protocol.pack_str("{a}s"),
        {"type": "run_script", "name": "s", "inputs": ["{a}x"], "output": "{a}s"},
    )

    add_request("cluster_slots_request", Command.CLUSTER_SLOTS, 11, b"", {"type": "empty"})
    topo = _topology()
    add_response(
        "cluster_slots_response",
        Command.CLUSTER_SLOTS,
        11,
        Status.OK,
        protocol.pack_topology(topo),
        {
            "type": "topology",
            "shards": [
                {"id": s.shard_id, "address": s.address, "slots": [s.slot_lo, s.slot_hi]}
                for s in topo.shards
            ],
        },
    )

    add_request("info_request", Command.INFO, 12, b"", {"type": "empty"})
    counters = {
        "puts": 3,
        "gets": 2,
        "model_runs": 64,
        "script_runs": 1,
        "batch_executions": 7,
        "bytes_in": 123456789,
        "bytes_out": 42,
        "keys_resident": 5,
    }
    add_response(
        "info_response",
        Command.INFO,
        12,
        Status.OK,
        protocol.pack_counters(counters),
        {"type": "counters", "counters": [[k, v] for k, v in counters.items()]},
    )

    u8 = _tensor_entry(DType.u8, [3], bytes([0, 1, 2]))
    add_request(
        "put_tensor_u8_request",
        Command.PUT_TENSOR,
        13,
        protocol.pack_str("u8demo") + _tensor_bytes(u8),
        {"type": "put_tensor", "key": "u8demo", "tensor": u8},
    )

    f64 = _tensor_entry(DType.f64, [2], struct.pack("<2d", 1.0, -0.5))
    add_request(
        "put_tensor_f64_request",
        Command.PUT_TENSOR,
        14,
        protocol.pack_str("f64demo") + _tensor_bytes(f64),
        {"type": "put_tensor", "key": "f64demo", "tensor": f64},
    )

    i32 = _tensor_entry(DType.i32, [2, 1], struct.pack("<2i", -7, 2**31 - 1))
    add_request(
        "put_tensor_i32_request",
        Command.PUT_TENSOR,
        15,
        protocol.pack_str("i32demo") + _tensor_bytes(i32),
        {"type": "put_tensor", "key": "i32demo", "tensor": i32},
    )

    i64 = _tensor_entry(DType.i64, [1], struct.pack("<q", -(2**40)))
    add_request(
        "put_tensor_i64_request",
        Command.PUT_TENSOR,
        16,
        protocol.pack_str("i64demo") + _tensor_bytes(i64),
        {"type": "put_tensor", "key": "i64demo", "tensor": i64},
    )

    return frames


def write_golden(out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = build_frames()
    manifest = []
    written = []
    for i, frame in enumerate(frames):
        filename = f"{i:02d}_{frame.name}.bin"
        path = out_dir / filename
        path.write_bytes(frame.data)
        written.append(path)
        manifest.append({"file": filename, **frame.entry})
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps({"frames": manifest}, indent=2) + "\n", encoding="utf-8")
    written.append(manifest_path)
    return written


def main(argv: list[str] | None = None) -> int:
    args = argv if argv is not None else sys.argv[1:]
    out = args[0] if args else "protocol/golden"
    for path in write_golden(Path(out)):
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
