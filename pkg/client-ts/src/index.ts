export { CRC16_TABLE, NUM_SLOTS, crc16, hashTag, keySlot, tagForSlot } from "./crc16.js";
export {
  DType,
  DTYPE_WIDTH,
  MAX_DIMS,
  Tensor,
  decodeTensor,
  decodeTensorAt,
  encodeTensor,
} from "./tensor.js";
export * from "./protocol.js";
export { TensorGridClient } from "./client.js";
