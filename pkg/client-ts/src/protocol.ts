/**
 * Frame layer of the wire protocol (all integers little-endian):
 *
 *   request:  length u32 | version u16 = 1 | command u8 | request id u32 | body
 *   response: same header | status u8 | payload
 *
 * The length counts everything after the length field. Strings are u16
 * length + UTF-8; key lists are u16 count + strings. Status 0 is OK;
 * anything else maps to a typed error whose message is the payload.
 */

export const VERSION = 1;
export const HEADER_SIZE = 7; // version + command + request id

export enum Command {
  PUT_TENSOR = 0x01,
  GET_TENSOR = 0x02,
  DEL = 0x03,
  PUT_DATASET = 0x04,
  GET_DATASET = 0x05,
  SET_MODEL = 0x06,
  RUN_MODEL = 0x07,
  SET_SCRIPT = 0x08,
  RUN_SCRIPT = 0x09,
  CLUSTER_SLOTS = 0x0a,
  PING = 0x0b,
  INFO = 0x0c,
}

export enum Status {
  OK = 0,
  NOT_FOUND = 1,
  WRONG_SHARD = 2,
  MALFORMED = 3,
  WRONG_KIND = 4,
  MODEL_NOT_FOUND = 5,
  EXEC_ERROR = 6,
  INPUT_MISSING = 7,
  BAD_MODEL = 8,
}

export class TensorGridError extends Error {}
export class NotFoundError extends TensorGridError {}
export class MalformedError extends TensorGridError {}
export class WrongKindError extends TensorGridError {}
export class ModelNotFoundError extends TensorGridError {}
export class ExecError extends TensorGridError {}
export class InputMissingError extends TensorGridError {}
export class BadModelError extends TensorGridError {}
export class UnreachableError extends TensorGridError {}
export class ProtocolVersionMismatchError extends TensorGridError {}
export class PartialBroadcastError extends TensorGridError {
  constructor(message: string, readonly failed: Map<number, Error>) {
    super(message);
  }
}

export class WrongShardError extends TensorGridError {
  constructor(message: string, readonly owner: number, readonly slot: number | null) {
    super(message);
  }
}

/** Extract owner (and slot) from a WrongShard error string. */
export function parseWrongShard(message: string): { owner: number; slot: number | null } {
  let owner: number | null = null;
  let slot: number | null = null;
  for (const token of message.split(" ")) {
    if (token.startsWith("owner=")) owner = parseInt(token.slice(6), 10);
    else if (token.startsWith("slot=")) slot = parseInt(token.slice(5), 10);
  }
  if (owner === null) throw new MalformedError(`WrongShard payload without owner: ${message}`);
  return { owner, slot };
}

export function errorForStatus(status: Status, message: string): TensorGridError {
  switch (status) {
    case Status.NOT_FOUND:
      return new NotFoundError(message);
    case Status.WRONG_SHARD: {
      const { owner, slot } = parseWrongShard(message);
      return new WrongShardError(message, owner, slot);
    }
    case Status.MALFORMED:
      return new MalformedError(message);
    case Status.WRONG_KIND:
      return new WrongKindError(message);
    case Status.MODEL_NOT_FOUND:
      return new ModelNotFoundError(message);
    case Status.EXEC_ERROR:
      return new ExecError(message);
    case Status.INPUT_MISSING:
      return new InputMissingError(message);
    case Status.BAD_MODEL:
      return new BadModelError(message);
    default:
      return new TensorGridError(`status ${status}: ${message}`);
  }
}

// --- body primitives ---------------------------------------------------------

export function packString(s: string): Buffer {
  const raw = Buffer.from(s, "utf-8");
  if (raw.length > 0xffff) throw new MalformedError("string exceeds u16 length prefix");
  const out = Buffer.alloc(2 + raw.length);
  out.writeUInt16LE(raw.length, 0);
  raw.copy(out, 2);
  return out;
}

export function readString(buf: Buffer, offset: number): [string, number] {
  if (buf.length - offset < 2) throw new MalformedError("string length truncated");
  const n = buf.readUInt16LE(offset);
  if (buf.length - offset - 2 < n) throw new MalformedError("string body truncated");
  return [buf.toString("utf-8", offset + 2, offset + 2 + n), offset + 2 + n];
}

export function packKeyList(keys: string[]): Buffer {
  const head = Buffer.alloc(2);
  head.writeUInt16LE(keys.length, 0);
  return Buffer.concat([head, ...keys.map(packString)]);
}

export function readKeyList(buf: Buffer, offset: number): [string[], number] {
  if (buf.length - offset < 2) throw new MalformedError("key list count truncated");
  const n = buf.readUInt16LE(offset);
  let off = offset + 2;
  const keys: string[] = [];
  for (let i = 0; i < n; i++) {
    const [key, next] = readString(buf, off);
    keys.push(key);
    off = next;
  }
  return [keys, off];
}

export interface ShardInfo {
  shardId: number;
  address: string;
  slotLo: number;
  slotHi: number;
}

export interface Topology {
  shards: ShardInfo[];
}

export function packTopology(topo: Topology): Buffer {
  const parts: Buffer[] = [];
  const head = Buffer.alloc(2);
  head.writeUInt16LE(topo.shards.length, 0);
  parts.push(head);
  for (const s of topo.shards) {
    const id = Buffer.alloc(2);
    id.writeUInt16LE(s.shardId, 0);
    const range = Buffer.alloc(4);
    range.writeUInt16LE(s.slotLo, 0);
    range.writeUInt16LE(s.slotHi, 2);
    parts.push(id, packString(s.address), range);
  }
  return Buffer.concat(parts);
}

export function parseTopology(buf: Buffer, offset = 0): [Topology, number] {
  if (buf.length - offset < 2) throw new MalformedError("topology count truncated");
  const n = buf.readUInt16LE(offset);
  let off = offset + 2;
  const shards: ShardInfo[] = [];
  for (let i = 0; i < n; i++) {
    const shardId = buf.readUInt16LE(off);
    off += 2;
    const [address, next] = readString(buf, off);
    off = next;
    const slotLo = buf.readUInt16LE(off);
    const slotHi = buf.readUInt16LE(off + 2);
    off += 4;
    shards.push({ shardId, address, slotLo, slotHi });
  }
  return [{ shards }, off];
}

export function packCounters(counters: Array<[string, number]>): Buffer {
  const head = Buffer.alloc(2);
  head.writeUInt16LE(counters.length, 0);
  const parts: Buffer[] = [head];
  for (const [name, value] of counters) {
    const v = Buffer.alloc(8);
    v.writeBigUInt64LE(BigInt(value), 0);
    parts.push(packString(name), v);
  }
  return Buffer.concat(parts);
}

export function parseCounters(buf: Buffer, offset = 0): [Map<string, number>, number] {
  if (buf.length - offset < 2) throw new MalformedError("counter count truncated");
  const n = buf.readUInt16LE(offset);
  let off = offset + 2;
  const counters = new Map<string, number>();
  for (let i = 0; i < n; i++) {
    const [name, next] = readString(buf, off);
    off = next;
    counters.set(name, Number(buf.readBigUInt64LE(off)));
    off += 8;
  }
  return [counters, off];
}

// --- framing -------------------------------------------------------------------

export function packRequest(command: Command, requestId: number, body: Buffer = Buffer.alloc(0)): Buffer {
  const out = Buffer.alloc(4 + HEADER_SIZE + body.length);
  out.writeUInt32LE(HEADER_SIZE + body.length, 0);
  out.writeUInt16LE(VERSION, 4);
  out.writeUInt8(command, 6);
  out.writeUInt32LE(requestId, 7);
  body.copy(out, 11);
  return out;
}

export function packResponse(
  command: Command,
  requestId: number,
  status: Status,
  payload: Buffer = Buffer.alloc(0),
): Buffer {
  const out = Buffer.alloc(4 + HEADER_SIZE + 1 + payload.length);
  out.writeUInt32LE(HEADER_SIZE + 1 + payload.length, 0);
  out.writeUInt16LE(VERSION, 4);
  out.writeUInt8(command, 6);
  out.writeUInt32LE(requestId, 7);
  out.writeUInt8(status, 11);
  payload.copy(out, 12);
  return out;
}

export interface Response {
  version: number;
  command: number;
  requestId: number;
  status: Status;
  payload: Buffer;
}

/** Split a response frame (without the length prefix). */
export function parseResponse(frame: Buffer): Response {
  if (frame.length < HEADER_SIZE + 1) throw new MalformedError("response shorter than header");
  return {
    version: frame.readUInt16LE(0),
    command: frame.readUInt8(2),
    requestId: frame.readUInt32LE(3),
    status: frame.readUInt8(7) as Status,
    payload: Buffer.from(frame.subarray(8)),
  };
}

export interface Request {
  version: number;
  command: number;
  requestId: number;
  body: Buffer;
}

export function parseRequest(frame: Buffer): Request {
  if (frame.length < HEADER_SIZE) throw new MalformedError("request shorter than header");
  return {
    version: frame.readUInt16LE(0),
    command: frame.readUInt8(2),
    requestId: frame.readUInt32LE(3),
    body: Buffer.from(frame.subarray(7)),
  };
}
