"""Conformance against the checked-in golden frames.

Each frame is rebuilt from the manifest's semantic description through the
real encoder and must match the committed bytes exactly; decoding the
committed bytes must reproduce the description. Any second-language client
runs the same suite against the same files.
"""

import base64
import json
from pathlib import Path

import pytest

from tensorgrid import protocol
from tensorgrid.golden import build_frames
from tensorgrid.protocol import Command, Status
from tensorgrid.routing import ClusterTopology, ShardInfo
from tensorgrid.tensors import DType, make_tensor, serialize_tensor

GOLDEN_DIR = Path(__file__).resolve().parent.parent / "protocol" / "golden"


def load_manifest():
    with open(GOLDEN_DIR / "manifest.json", encoding="utf-8") as f:
        return json.load(f)["frames"]


def encode_body(entry: dict) -> bytes:
    body_type = entry["type"]
    if body_type == "empty":
        return b""
    if body_type == "key":
        return protocol.pack_str(entry["key"])
    if body_type == "put_tensor":
        return protocol.pack_str(entry["key"]) + encode_tensor(entry["tensor"])
    if body_type == "set_model":
        return (
            protocol.pack_str(entry["name"])
            + entry["batch_size"].to_bytes(4, "little")
            + protocol.pack_str(entry["device"])
            + base64.b64decode(entry["blob_b64"])
        )
    if body_type == "run_model":
        return (
            protocol.pack_str(entry["name"])
            + protocol.pack_key_list(entry["inputs"])
            + protocol.pack_key_list(entry["outputs"])
        )
    if body_type == "set_script":
        return protocol.pack_str(entry["name"]) + base64.b64decode(entry["blob_b64"])
    if body_type == "run_script":
        return (
            protocol.pack_str(entry["name"])
            + protocol.pack_key_list(entry["inputs"])
            + protocol.pack_str(entry["output"])
        )
    raise AssertionError(f"unknown body type {body_type}")


def encode_tensor(entry: dict) -> bytes:
    t = make_tensor(DType[entry["dtype"]], entry["shape"], base64.b64decode(entry["data_b64"]))
    return serialize_tensor(t)


def encode_payload(entry: dict) -> bytes:
    payload_type = entry["type"]
    if payload_type == "empty":
        return b""
    if payload_type == "error":
        return entry["message"].encode("utf-8")
    if payload_type == "tensor":
        return encode_tensor(entry["tensor"])
    if payload_type == "topology":
        topo = ClusterTopology(
            tuple(
                ShardInfo(s["id"], s["address"], s["slots"][0], s["slots"][1])
                for s in entry["shards"]
            )
        )
        return protocol.pack_topology(topo)
    if payload_type == "counters":
        return protocol.pack_counters({k: v for k, v in entry["counters"]})
    raise AssertionError(f"unknown payload type {payload_type}")


@pytest.mark.parametrize("entry", load_manifest(), ids=lambda e: e["file"])
def test_encode_matches_golden(entry):
    golden = (GOLDEN_DIR / entry["file"]).read_bytes()
    command = Command[entry["command"]]
    if entry["kind"] == "request":
        rebuilt = protocol.pack_request(command, entry["request_id"], encode_body(entry["body"]))
    else:
        rebuilt = protocol.pack_response(
            command, entry["request_id"], Status(entry["status"]), encode_payload(entry["payload"])
        )
    assert rebuilt == golden


@pytest.mark.parametrize("entry", load_manifest(), ids=lambda e: e["file"])
def test_decode_matches_manifest(entry):
    golden = (GOLDEN_DIR / entry["file"]).read_bytes()
    frame = golden[4:]
    assert len(golden) == 4 + int.from_bytes(golden[:4], "little")
    if entry["kind"] == "request":
        version, command, request_id, body = protocol.parse_request(frame)
        assert version == protocol.VERSION
        assert command == int(Command[entry["command"]])
        assert request_id == entry["request_id"]
        assert body == encode_body(entry["body"])
    else:
        version, command, request_id, status, payload = protocol.parse_response(frame)
        assert version == protocol.VERSION
        assert command == int(Command[entry["command"]])
        assert request_id == entry["request_id"]
        assert status == entry["status"]
        assert payload == encode_payload(entry["payload"])


def test_wrong_shard_payload_parses():
    for entry in load_manifest():
        if entry["kind"] == "response" and entry["status"] == int(Status.WRONG_SHARD):
            owner, slot = protocol.parse_wrong_shard(entry["payload"]["message"])
            assert owner == entry["payload"]["owner"]
            assert slot == entry["payload"]["slot"]
            return
    raise AssertionError("no wrong-shard frame in the golden set")


def test_committed_files_current_with_generator():
    """The checked-in bytes must match what the generator produces today."""
    for frame, entry in zip(build_frames(), load_manifest()):
        assert (GOLDEN_DIR / entry["file"]).read_bytes() == frame.data


def test_golden_set_covers_all_dtypes():
    dtypes = set()
    for entry in load_manifest():
        body = entry.get("body", {})
        if body.get("type") == "put_tensor":
            dtypes.add(body["tensor"]["dtype"])
    assert dtypes == {"f32", "f64", "i32", "i64", "u8"}
