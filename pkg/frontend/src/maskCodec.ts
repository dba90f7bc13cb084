/** Client-side mask decoding: row-major RLE and 8-bit grayscale PNG.
 *
 * Both decoders run in browsers and in Node (PNG inflate relies on the
 * standard DecompressionStream). The UI never re-encodes server masks; the
 * RLE encoder exists for symmetry checks.
 */

import type { Bitmap, GrayImage, RleMask } from './types.js';

export function decodeRle(rle: RleMask): Bitmap {
  const [height, width] = rle.size;
  const data = new Uint8Array(height * width);
  let pos = 0;
  let value = 0;
  for (const run of rle.counts) {
    if (run < 0 || !Number.isInteger(run)) {
      throw new Error(`invalid RLE run ${run}`);
    }
    if (value === 1) {
      data.fill(1, pos, pos + run);
    }
    pos += run;
    value ^= 1;
  }
  if (pos !== height * width) {
    throw new Error(`RLE covers ${pos} pixels, expected ${height * width}`);
  }
  return { width, height, data };
}

export function encodeRle(mask: Bitmap): RleMask {
  const counts: number[] = [];
  let current = 0;
  let run = 0;
  for (const px of mask.data) {
    const bit = px > 0 ? 1 : 0;
    if (bit === current) {
      run += 1;
    } else {
      counts.push(run);
      current = bit;
      run = 1;
    }
  }
  counts.push(run);
  return { counts, size: [mask.height, mask.width] };
}

export function base64ToBytes(b64: string): Uint8Array {
  const binary = atob(b64);
  const bytes = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) {
    bytes[i] = binary.charCodeAt(i);
  }
  return bytes;
}

const PNG_SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

async function inflate(compressed: Uint8Array): Promise<Uint8Array> {
  const stream = new DecompressionStream('deflate');
  const writer = stream.writable.getWriter();
  void writer.write(compressed as BufferSource);
  void writer.close();
  const chunks: Uint8Array[] = [];
  const reader = stream.readable.getReader();
  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    chunks.push(value);
  }
  const total = chunks.reduce((n, c) => n + c.length, 0);
  const out = new Uint8Array(total);
  let offset = 0;
  for (const chunk of chunks) {
    out.set(chunk, offset);
    offset += chunk.length;
  }
  return out;
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

/** Decode an 8-bit grayscale (color type 0), non-interlaced PNG. */
export async function decodePngGray(bytes: Uint8Array): Promise<GrayImage> {
  for (let i = 0; i < PNG_SIGNATURE.length; i++) {
    if (bytes[i] !== PNG_SIGNATURE[i]) throw new Error('not a PNG file');
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  let offset = 8;
  let width = 0;
  let height = 0;
  const idat: Uint8Array[] = [];
  while (offset < bytes.length) {
    const length = view.getUint32(offset);
    const type = String.fromCharCode(...bytes.subarray(offset + 4, offset + 8));
    const body = bytes.subarray(offset + 8, offset + 8 + length);
    if (type === 'IHDR') {
      width = view.getUint32(offset + 8);
      height = view.getUint32(offset + 12);
      const bitDepth = bytes[offset + 16];
      const colorType = bytes[offset + 17];
      const interlace = bytes[offset + 20];
      if (bitDepth !== 8 || colorType !== 0 || interlace !== 0) {
        throw new Error(
          `unsupported PNG: depth ${bitDepth}, color type ${colorType}, interlace ${interlace}`,
        );
      }
    } else if (type === 'IDAT') {
      idat.push(body);
    } else if (type === 'IEND') {
      break;
    }
    offset += 12 + length; // length + type + data + crc
  }
  if (!width || !height) throw new Error('PNG missing IHDR');

  const compressed = new Uint8Array(idat.reduce((n, c) => n + c.length, 0));
  let at = 0;
  for (const chunk of idat) {
    compressed.set(chunk, at);
    at += chunk.length;
  }
  const raw = await inflate(compressed);
  const stride = width + 1; // filter byte + one byte per pixel
  if (raw.length < stride * height) {
    throw new Error('PNG data truncated');
  }
  const gray = new Uint8Array(width * height);
  const prior = new Uint8Array(width);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * stride];
    const line = raw.subarray(y * stride + 1, (y + 1) * stride);
    const out = gray.subarray(y * width, (y + 1) * width);
    for (let x = 0; x < width; x++) {
      const left = x > 0 ? out[x - 1] : 0;
      const up = prior[x];
      const upLeft = x > 0 ? prior[x - 1] : 0;
      let value: number;
      switch (filter) {
        case 0: value = line[x]; break;
        case 1: value = line[x] + left; break;
        case 2: value = line[x] + up; break;
        case 3: value = line[x] + Math.floor((left + up) / 2); break;
        case 4: value = line[x] + paeth(left, up, upLeft); break;
        default: throw new Error(`unknown PNG filter ${filter}`);
      }
      out[x] = value & 0xff;
    }
    prior.set(out);
  }
  return { width, height, gray };
}

export async function pngBase64ToBitmap(b64: string): Promise<Bitmap> {
  const image = await decodePngGray(base64ToBytes(b64));
  const data = new Uint8Array(image.width * image.height);
  for (let i = 0; i < data.length; i++) {
    data[i] = image.gray[i] > 127 ? 1 : 0;
  }
  return { width: image.width, height: image.height, data };
}

export async function decodeMaskPayload(
  mask: string | RleMask,
): Promise<Bitmap> {
  if (typeof mask === 'string') {
    return pngBase64ToBitmap(mask);
  }
  return decodeRle(mask);
}
