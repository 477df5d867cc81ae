/**
 * Cross-language conformance: rebuild every golden frame from the manifest
 * through this client's encoders and compare byte-for-byte with the files
 * the primary implementation checked in; then decode the files and check
 * the fields survive.
 */

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { describe, expect, test } from "vitest";

import {
  Command,
  Status,
  packCounters,
  packKeyList,
  packRequest,
  packResponse,
  packString,
  packTopology,
  parseRequest,
  parseResponse,
  parseWrongShard,
} from "../src/protocol.js";
import { DType, Tensor, encodeTensor } from "../src/tensor.js";

const goldenDir = join(dirname(fileURLToPath(import.meta.url)), "..", "..", "protocol", "golden");

interface ManifestFrame {
  file: string;
  kind: "request" | "response";
  command: keyof typeof Command;
  request_id: number;
  status?: number;
  body?: Record<string, any>;
  payload?: Record<string, any>;
}

const manifest: ManifestFrame[] = JSON.parse(
  readFileSync(join(goldenDir, "manifest.json"), "utf-8"),
).frames;

function tensorBytes(entry: Record<string, any>): Buffer {
  const dtype = DType[entry.dtype as keyof typeof DType];
  const data = Buffer.from(entry.data_b64, "base64");
  return encodeTensor(new Tensor(dtype, entry.shape, data));
}

function encodeBody(body: Record<string, any>): Buffer {
  switch (body.type) {
    case "empty":
      return Buffer.alloc(0);
    case "key":
      return packString(body.key);
    case "put_tensor":
      return Buffer.concat([packString(body.key), tensorBytes(body.tensor)]);
    case "set_model": {
      const size = Buffer.alloc(4);
      size.writeUInt32LE(body.batch_size, 0);
      return Buffer.concat([
        packString(body.name),
        size,
        packString(body.device),
        Buffer.from(body.blob_b64, "base64"),
      ]);
    }
    case "run_model":
      return Buffer.concat([
        packString(body.name),
        packKeyList(body.inputs),
        packKeyList(body.outputs),
      ]);
    case "set_script":
      return Buffer.concat([packString(body.name), Buffer.from(body.blob_b64, "base64")]);
    case "run_script":
      return Buffer.concat([
        packString(body.name),
        packKeyList(body.inputs),
        packString(body.output),
      ]);
    default:
      throw new Error(`unknown body type ${body.type}`);
  }
}

function encodePayload(payload: Record<string, any>): Buffer {
  switch (payload.type) {
    case "empty":
      return Buffer.alloc(0);
    case "error":
      return Buffer.from(payload.message, "utf-8");
    case "tensor":
      return tensorBytes(payload.tensor);
    case "topology":
      return packTopology({
        shards: payload.shards.map((s: any) => ({
          shardId: s.id,
          address: s.address,
          slotLo: s.slots[0],
          slotHi: s.slots[1],
        })),
      });
    case "counters":
      return packCounters(payload.counters);
    default:
      throw new Error(`unknown payload type ${payload.type}`);
  }
}

describe("golden frames", () => {
  for (const entry of manifest) {
    test(`encode ${entry.file}`, () => {
      const golden = readFileSync(join(goldenDir, entry.file));
      const command = Command[entry.command];
      const rebuilt =
        entry.kind === "request"
          ? packRequest(command, entry.request_id, encodeBody(entry.body!))
          : packResponse(command, entry.request_id, entry.status as Status, encodePayload(entry.payload!));
      expect(rebuilt.toString("hex")).toBe(golden.toString("hex"));
    });

    test(`decode ${entry.file}`, () => {
      const golden = readFileSync(join(goldenDir, entry.file));
      expect(golden.readUInt32LE(0)).toBe(golden.length - 4);
      const frame = golden.subarray(4);
      if (entry.kind === "request") {
        const req = parseRequest(frame);
        expect(req.version).toBe(1);
        expect(req.command).toBe(Command[entry.command]);
        expect(req.requestId).toBe(entry.request_id);
        expect(Buffer.compare(req.body, encodeBody(entry.body!))).toBe(0);
      } else {
        const res = parseResponse(frame);
        expect(res.version).toBe(1);
        expect(res.command).toBe(Command[entry.command]);
        expect(res.requestId).toBe(entry.request_id);
        expect(res.status).toBe(entry.status);
        expect(Buffer.compare(res.payload, encodePayload(entry.payload!))).toBe(0);
      }
    });
  }

  test("wrong-shard payload parses to its owner", () => {
    const entry = manifest.find(
      (e) => e.kind === "response" && e.status === Status.WRONG_SHARD,
    );
    expect(entry).toBeDefined();
    const parsed = parseWrongShard(entry!.payload!.message);
    expect(parsed.owner).toBe(entry!.payload!.owner);
    expect(parsed.slot).toBe(entry!.payload!.slot);
  });

  test("the set covers every dtype", () => {
    const dtypes = new Set<string>();
    for (const entry of manifest) {
      if (entry.body?.type === "put_tensor") dtypes.add(entry.body.tensor.dtype);
    }
    expect(dtypes).toEqual(new Set(["f32", "f64", "i32", "i64", "u8"]));
  });
});
