/**
 * CRC-16/XMODEM (poly 0x1021, init 0, no reflection, no final xor) and the
 * 16384-bucket hash-slot routing built on it. Must stay bit-exact with the
 * server's table; the golden frames pin it.
 */

export const NUM_SLOTS = 16384;

const POLY = 0x1021;

function buildTable(): Uint16Array {
  const table = new Uint16Array(256);
  for (let byte = 0; byte < 256; byte++) {
    let crc = byte << 8;
    for (let bit = 0; bit < 8; bit++) {
      crc = crc & 0x8000 ? ((crc << 1) ^ POLY) & 0xffff : (crc << 1) & 0xffff;
    }
    table[byte] = crc;
  }
  return table;
}

export const CRC16_TABLE = buildTable();

export function crc16(data: Uint8Array): number {
  let crc = 0;
  for (const b of data) {
    crc = ((crc << 8) & 0xffff) ^ CRC16_TABLE[((crc >> 8) ^ b) & 0xff];
  }
  return crc;
}

/** Content of the first non-empty {...} pair, or null. */
export function hashTag(key: string): string | null {
  const start = key.indexOf("{");
  if (start === -1) return null;
  const end = key.indexOf("}", start + 1);
  if (end === -1 || end === start + 1) return null;
  return key.slice(start + 1, end);
}

const utf8 = new TextEncoder();

export function keySlot(key: string): number {
  if (key.length === 0) {
    throw new Error("cannot route an empty key");
  }
  const tag = hashTag(key);
  const subject = tag !== null ? tag : key;
  return crc16(utf8.encode(subject)) % NUM_SLOTS;
}

const tagCache = new Map<number, string>();

/** Deterministic short string hashing to exactly `slot`; cached. */
export function tagForSlot(slot: number): string {
  const cached = tagCache.get(slot);
  if (cached !== undefined) return cached;
  for (let n = 0; ; n++) {
    const candidate = `t${n}`;
    if (crc16(utf8.encode(candidate)) % NUM_SLOTS === slot) {
      tagCache.set(slot, candidate);
      return candidate;
    }
  }
}
