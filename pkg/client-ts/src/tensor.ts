/**
 * Tensor wire format, byte-identical to the server's canonical encoding:
 *
 *   dtype code u8 | ndim u8 | dims u32 LE each | row-major payload
 *
 * Payload bytes are always little-endian regardless of the host; typed
 * array views go through DataView for portability.
 */

export enum DType {
  f32 = 1,
  f64 = 2,
  i32 = 3,
  i64 = 4,
  u8 = 5,
}

export const DTYPE_WIDTH: Record<DType, number> = {
  [DType.f32]: 4,
  [DType.f64]: 8,
  [DType.i32]: 4,
  [DType.i64]: 8,
  [DType.u8]: 1,
};

export const MAX_DIMS = 8;

export type TypedValues = Float32Array | Float64Array | Int32Array | BigInt64Array | Uint8Array;

export class Tensor {
  readonly dtype: DType;
  readonly shape: number[];
  readonly data: Buffer;

  constructor(dtype: DType, shape: number[], data: Buffer) {
    if (shape.length === 0 || shape.length > MAX_DIMS) {
      throw new Error(`ndim ${shape.length} outside [1, ${MAX_DIMS}]`);
    }
    for (const d of shape) {
      if (!Number.isInteger(d) || d < 1) throw new Error(`dims must be >= 1, got ${d}`);
    }
    const expected = shape.reduce((a, b) => a * b, 1) * DTYPE_WIDTH[dtype];
    if (data.length !== expected) {
      throw new Error(`payload is ${data.length} bytes, expected ${expected}`);
    }
    this.dtype = dtype;
    this.shape = [...shape];
    this.data = data;
  }

  get numel(): number {
    return this.shape.reduce((a, b) => a * b, 1);
  }

  values(): TypedValues {
    const view = new DataView(this.data.buffer, this.data.byteOffset, this.data.length);
    const n = this.numel;
    switch (this.dtype) {
      case DType.f32: {
        const out = new Float32Array(n);
        for (let i = 0; i < n; i++) out[i] = view.getFloat32(i * 4, true);
        return out;
      }
      case DType.f64: {
        const out = new Float64Array(n);
        for (let i = 0; i < n; i++) out[i] = view.getFloat64(i * 8, true);
        return out;
      }
      case DType.i32: {
        const out = new Int32Array(n);
        for (let i = 0; i < n; i++) out[i] = view.getInt32(i * 4, true);
        return out;
      }
      case DType.i64: {
        const out = new BigInt64Array(n);
        for (let i = 0; i < n; i++) out[i] = view.getBigInt64(i * 8, true);
        return out;
      }
      case DType.u8:
        return new Uint8Array(this.data);
    }
  }

  static fromValues(dtype: DType, shape: number[], values: ArrayLike<number> | BigInt64Array): Tensor {
    const n = shape.reduce((a, b) => a * b, 1);
    if (values.length !== n) {
      throw new Error(`got ${values.length} values for shape of ${n} elements`);
    }
    const data = Buffer.alloc(n * DTYPE_WIDTH[dtype]);
    const view = new DataView(data.buffer, data.byteOffset, data.length);
    for (let i = 0; i < n; i++) {
      switch (dtype) {
        case DType.f32:
          view.setFloat32(i * 4, Number(values[i]), true);
          break;
        case DType.f64:
          view.setFloat64(i * 8, Number(values[i]), true);
          break;
        case DType.i32:
          view.setInt32(i * 4, Number(values[i]), true);
          break;
        case DType.i64:
          view.setBigInt64(i * 8, BigInt(values[i] as number | bigint), true);
          break;
        case DType.u8:
          view.setUint8(i, Number(values[i]));
          break;
      }
    }
    return new Tensor(dtype, shape, data);
  }
}

export function encodeTensor(t: Tensor): Buffer {
  const header = Buffer.alloc(2 + 4 * t.shape.length);
  header.writeUInt8(t.dtype, 0);
  header.writeUInt8(t.shape.length, 1);
  t.shape.forEach((d, i) => header.writeUInt32LE(d, 2 + 4 * i));
  return Buffer.concat([header, t.data]);
}

export function decodeTensorAt(buf: Buffer, offset: number): [Tensor, number] {
  if (buf.length - offset < 2) throw new Error("tensor header truncated");
  const dtype = buf.readUInt8(offset) as DType;
  if (!(dtype in DTYPE_WIDTH)) throw new Error(`unknown dtype code ${dtype}`);
  const ndim = buf.readUInt8(offset + 1);
  if (ndim === 0 || ndim > MAX_DIMS) throw new Error(`ndim ${ndim} outside [1, ${MAX_DIMS}]`);
  let off = offset + 2;
  if (buf.length - off < 4 * ndim) throw new Error("tensor dims truncated");
  const shape: number[] = [];
  for (let i = 0; i < ndim; i++) {
    shape.push(buf.readUInt32LE(off));
    off += 4;
  }
  const nbytes = shape.reduce((a, b) => a * b, 1) * DTYPE_WIDTH[dtype];
  if (buf.length - off < nbytes) throw new Error("tensor payload truncated");
  const data = Buffer.from(buf.subarray(off, off + nbytes));
  return [new Tensor(dtype, shape, data), off + nbytes];
}

export function decodeTensor(buf: Buffer): Tensor {
  const [t, end] = decodeTensorAt(buf, 0);
  if (end !== buf.length) throw new Error(`${buf.length - end} trailing bytes after tensor`);
  return t;
}
