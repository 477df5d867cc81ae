/**
 * Cluster client: topology discovery over CLUSTER_SLOTS, slot routing for
 * data keys, model/script broadcast, and the cross-shard execution
 * contract (executing shard = owner of the first input key; non-resident
 * inputs and outputs staged under hash-tagged temporaries that are always
 * deleted, success or failure).
 */

import * as net from "node:net";
import { randomBytes } from "node:crypto";

import { keySlot, tagForSlot } from "./crc16.js";
import {
  Command,
  PartialBroadcastError,
  ProtocolVersionMismatchError,
  Status,
  TensorGridError,
  Topology,
  UnreachableError,
  VERSION,
  WrongShardError,
  errorForStatus,
  packKeyList,
  packRequest,
  packString,
  parseCounters,
  parseResponse,
  parseTopology,
} from "./protocol.js";
import { Tensor, decodeTensor, encodeTensor } from "./tensor.js";

const CONNECT_TIMEOUT_MS = 5000;
const IO_TIMEOUT_MS = 150000;

class Connection {
  private chunks: Buffer = Buffer.alloc(0);
  private waiter: { resolve: (frame: Buffer) => void; reject: (e: Error) => void } | null = null;
  private failure: Error | null = null;
  private nextId = 1;
  private chain: Promise<unknown> = Promise.resolve();

  private constructor(readonly address: string, private readonly socket: net.Socket) {
    socket.on("data", (data) => this.onData(data));
    socket.on("error", (err) => this.fail(new UnreachableError(`${address}: ${err.message}`)));
    socket.on("close", () => this.fail(new UnreachableError(`${address}: connection closed`)));
  }

  static connect(address: string): Promise<Connection> {
    const sep = address.lastIndexOf(":");
    const host = address.slice(0, sep);
    const port = parseInt(address.slice(sep + 1), 10);
    return new Promise((resolve, reject) => {
      const socket = net.createConnection({ host, port, noDelay: true });
      const timer = setTimeout(() => {
        socket.destroy();
        reject(new UnreachableError(`cannot reach shard at ${address}: timeout`));
      }, CONNECT_TIMEOUT_MS);
      socket.once("connect", () => {
        clearTimeout(timer);
        resolve(new Connection(address, socket));
      });
      socket.once("error", (err) => {
        clearTimeout(timer);
        reject(new UnreachableError(`cannot reach shard at ${address}: ${err.message}`));
      });
    });
  }

  private fail(err: Error): void {
    this.failure = this.failure ?? err;
    if (this.waiter) {
      const w = this.waiter;
      this.waiter = null;
      w.reject(err);
    }
  }

  private onData(data: Buffer): void {
    this.chunks = this.chunks.length === 0 ? data : Buffer.concat([this.chunks, data]);
    this.tryDeliver();
  }

  private tryDeliver(): void {
    if (!this.waiter || this.chunks.length < 4) return;
    const frameLength = this.chunks.readUInt32LE(0);
    if (this.chunks.length < 4 + frameLength) return;
    const frame = Buffer.from(this.chunks.subarray(4, 4 + frameLength));
    this.chunks = Buffer.from(this.chunks.subarray(4 + frameLength));
    const w = this.waiter;
    this.waiter = null;
    w.resolve(frame);
  }

  /** One request/response exchange; exchanges on a connection serialize. */
  request(command: Command, body: Buffer = Buffer.alloc(0)): Promise<Buffer> {
    const run = this.chain.then(() => this.exchange(command, body));
    this.chain = run.catch(() => undefined); // keep the chain alive after errors
    return run;
  }

  private async exchange(command: Command, body: Buffer): Promise<Buffer> {
    if (this.failure) throw this.failure;
    const requestId = this.nextId++;
    this.socket.write(packRequest(command, requestId, body));
    const frame = await new Promise<Buffer>((resolve, reject) => {
      const timer = setTimeout(() => {
        this.fail(new UnreachableError(`${this.address}: request timed out`));
      }, IO_TIMEOUT_MS);
      this.waiter = {
        resolve: (f) => {
          clearTimeout(timer);
          resolve(f);
        },
        reject: (e) => {
          clearTimeout(timer);
          reject(e);
        },
      };
      this.tryDeliver(); // the frame may already be buffered
    });
    const response = parseResponse(frame);
    if (response.version !== VERSION) {
      throw new ProtocolVersionMismatchError(
        `shard ${this.address} speaks version ${response.version}, expected ${VERSION}`,
      );
    }
    if (response.requestId !== requestId || response.command !== command) {
      throw new TensorGridError(
        `response mismatch: sent (${command}, ${requestId}), got (${response.command}, ${response.requestId})`,
      );
    }
    if (response.status !== Status.OK) {
      throw errorForStatus(response.status, response.payload.toString("utf-8"));
    }
    return response.payload;
  }

  close(): void {
    this.socket.destroy();
  }
}

function slotOwner(topology: Topology, slot: number): number {
  for (const s of topology.shards) {
    if (slot >= s.slotLo && slot <= s.slotHi) return s.shardId;
  }
  throw new TensorGridError(`no owner for slot ${slot}`);
}

export class TensorGridClient {
  private constructor(
    public topology: Topology,
    private readonly conns: Map<number, Connection>,
    private readonly keyPrefix: string,
  ) {}

  /** Any one live shard suffices; the rest come from CLUSTER_SLOTS. */
  static async connect(seedAddress: string, keyPrefix = ""): Promise<TensorGridClient> {
    const seed = await Connection.connect(seedAddress);
    await seed.request(Command.PING);
    const raw = await seed.request(Command.CLUSTER_SLOTS);
    const [topology] = parseTopology(raw);
    const conns = new Map<number, Connection>();
    const owner = topology.shards.find((s) => s.address === seedAddress);
    if (owner) conns.set(owner.shardId, seed);
    else seed.close();
    return new TensorGridClient(topology, conns, keyPrefix);
  }

  close(): void {
    for (const conn of this.conns.values()) conn.close();
    this.conns.clear();
  }

  private shard(shardId: number) {
    const s = this.topology.shards.find((x) => x.shardId === shardId);
    if (!s) throw new TensorGridError(`no shard ${shardId} in topology`);
    return s;
  }

  private async conn(shardId: number): Promise<Connection> {
    let c = this.conns.get(shardId);
    if (!c) {
      c = await Connection.connect(this.shard(shardId).address);
      this.conns.set(shardId, c);
    }
    return c;
  }

  private key(name: string): string {
    return this.keyPrefix + name;
  }

  private async refetchTopology(): Promise<void> {
    for (const conn of this.conns.values()) {
      try {
        const raw = await conn.request(Command.CLUSTER_SLOTS);
        const [topology] = parseTopology(raw);
        this.topology = topology;
        for (const [shardId, c] of [...this.conns]) {
          const expected = topology.shards.find((s) => s.shardId === shardId)?.address;
          if (c.address !== expected) {
            c.close();
            this.conns.delete(shardId);
          }
        }
        return;
      } catch {
        continue;
      }
    }
    throw new UnreachableError("no shard answered a topology refresh");
  }

  /** Route by key slot; on WrongShard refresh the topology and retry once. */
  private async keyedRequest(key: string, command: Command, body: Buffer): Promise<Buffer> {
    const shardId = slotOwner(this.topology, keySlot(key));
    try {
      return await (await this.conn(shardId)).request(command, body);
    } catch (err) {
      if (!(err instanceof WrongShardError)) throw err;
      await this.refetchTopology();
      const retryShard = slotOwner(this.topology, keySlot(key));
      return (await this.conn(retryShard)).request(command, body);
    }
  }

  private async shardRequest(shardId: number, command: Command, body: Buffer = Buffer.alloc(0)) {
    return (await this.conn(shardId)).request(command, body);
  }

  // --- tensors -----------------------------------------------------------------

  async putTensor(name: string, tensor: Tensor): Promise<void> {
    const key = this.key(name);
    await this.keyedRequest(key, Command.PUT_TENSOR, Buffer.concat([packString(key), encodeTensor(tensor)]));
  }

  async getTensor(name: string): Promise<Tensor> {
    const key = this.key(name);
    const raw = await this.keyedRequest(key, Command.GET_TENSOR, packString(key));
    return decodeTensor(raw);
  }

  async del(name: string): Promise<void> {
    const key = this.key(name);
    await this.keyedRequest(key, Command.DEL, packString(key));
  }

  // --- models and scripts ----------------------------------------------------------

  async setModel(name: string, blob: Buffer, batchSize = 1, device = "cpu"): Promise<void> {
    const sizeField = Buffer.alloc(4);
    sizeField.writeUInt32LE(batchSize, 0);
    const body = Buffer.concat([packString(name), sizeField, packString(device), blob]);
    await this.broadcast(Command.SET_MODEL, body, `set_model(${name})`);
  }

  async setScript(name: string, blob: Buffer): Promise<void> {
    const body = Buffer.concat([packString(name), blob]);
    await this.broadcast(Command.SET_SCRIPT, body, `set_script(${name})`);
  }

  private async broadcast(command: Command, body: Buffer, what: string): Promise<void> {
    const failed = new Map<number, Error>();
    for (const shard of this.topology.shards) {
      try {
        await this.shardRequest(shard.shardId, command, body);
      } catch (err) {
        failed.set(shard.shardId, err as Error);
      }
    }
    if (failed.size > 0) {
      const reached = this.topology.shards.length - failed.size;
      throw new PartialBroadcastError(
        `${what} reached ${reached}/${this.topology.shards.length} shards; failed: ${[...failed.keys()].sort()}`,
        failed,
      );
    }
  }

  async runModel(name: string, inputNames: string[], outputNames: string[]): Promise<void> {
    await this.run(Command.RUN_MODEL, name, inputNames.map((n) => this.key(n)),
      outputNames.map((n) => this.key(n)), true);
  }

  async runScript(name: string, inputNames: string[], outputName: string): Promise<void> {
    await this.run(Command.RUN_SCRIPT, name, inputNames.map((n) => this.key(n)),
      [this.key(outputName)], false);
  }

  private async run(
    command: Command,
    name: string,
    inputKeys: string[],
    outputKeys: string[],
    multiOutput: boolean,
  ): Promise<void> {
    if (inputKeys.length === 0) throw new TensorGridError("need at least one input key");
    const execShard = slotOwner(this.topology, keySlot(inputKeys[0]));
    const tag = tagForSlot(this.shard(execShard).slotLo);
    const nonce = randomBytes(4).toString("hex");
    const temps: string[] = [];
    try {
      const stagedInputs: string[] = [];
      for (let i = 0; i < inputKeys.length; i++) {
        const key = inputKeys[i];
        if (slotOwner(this.topology, keySlot(key)) === execShard) {
          stagedInputs.push(key);
          continue;
        }
        const raw = await this.keyedRequest(key, Command.GET_TENSOR, packString(key));
        const tempKey = `{${tag}}tmp.${nonce}.in.${i}`;
        await this.shardRequest(execShard, Command.PUT_TENSOR, Buffer.concat([packString(tempKey), raw]));
        temps.push(tempKey);
        stagedInputs.push(tempKey);
      }
      const stagedOutputs: string[] = [];
      const moves: Array<[string, string]> = [];
      for (let j = 0; j < outputKeys.length; j++) {
        const key = outputKeys[j];
        if (slotOwner(this.topology, keySlot(key)) === execShard) {
          stagedOutputs.push(key);
          continue;
        }
        const tempKey = `{${tag}}tmp.${nonce}.out.${j}`;
        stagedOutputs.push(tempKey);
        temps.push(tempKey);
        moves.push([tempKey, key]);
      }
      const tail = multiOutput ? packKeyList(stagedOutputs) : packString(stagedOutputs[0]);
      const body = Buffer.concat([packString(name), packKeyList(stagedInputs), tail]);
      await this.shardRequest(execShard, command, body);
      for (const [tempKey, key] of moves) {
        const raw = await this.shardRequest(execShard, Command.GET_TENSOR, packString(tempKey));
        await this.keyedRequest(key, Command.PUT_TENSOR, Buffer.concat([packString(key), raw]));
      }
    } finally {
      for (const tempKey of temps) {
        try {
          await this.shardRequest(execShard, Command.DEL, packString(tempKey));
        } catch {
          // cleanup is best effort; the run's own error wins
        }
      }
    }
  }

  // --- introspection -----------------------------------------------------------------

  async ping(shardId = 0): Promise<void> {
    await this.shardRequest(shardId, Command.PING);
  }

  async info(shardId: number): Promise<Map<string, number>> {
    const raw = await this.shardRequest(shardId, Command.INFO);
    const [counters] = parseCounters(raw);
    return counters;
  }
}
