/** Minimal PNG codec for the viewer's image plumbing.
 *
 * Decodes the 8-bit truecolor images the render endpoint returns (RGB or
 * RGBA, non-interlaced) so changed pixels can be diffed client-side, and
 * encodes RGBA overlays using stored (uncompressed) deflate blocks. Runs on
 * the platform's DecompressionStream; no image libraries involved.
 */

export interface DecodedImage {
  width: number;
  height: number;
  /** Bytes per pixel: 3 for RGB, 4 for RGBA. */
  channels: 3 | 4;
  /** Row-major samples, `width * height * channels` bytes. */
  pixels: Uint8Array;
}

const SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

// -- helpers --------------------------------------------------------------

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(...parts: Uint8Array[]): number {
  let c = 0xffffffff;
  for (const part of parts) {
    for (let i = 0; i < part.length; i++) {
      c = CRC_TABLE[(c ^ part[i]) & 0xff] ^ (c >>> 8);
    }
  }
  return (c ^ 0xffffffff) >>> 0;
}

function adler32(data: Uint8Array): number {
  let a = 1;
  let b = 0;
  for (let i = 0; i < data.length; i++) {
    a = (a + data[i]) % 65521;
    b = (b + a) % 65521;
  }
  return ((b << 16) | a) >>> 0;
}

function u32be(value: number): Uint8Array {
  return new Uint8Array([(value >>> 24) & 0xff, (value >>> 16) & 0xff, (value >>> 8) & 0xff, value & 0xff]);
}

function ascii(text: string): Uint8Array {
  return new Uint8Array([...text].map((ch) => ch.charCodeAt(0)));
}

function concat(parts: Uint8Array[]): Uint8Array {
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let offset = 0;
  for (const part of parts) {
    out.set(part, offset);
    offset += part.length;
  }
  return out;
}

async function inflate(data: Uint8Array): Promise<Uint8Array> {
  // PNG image data is a zlib stream, which the standard calls "deflate".
  // Drive the transform directly so it works in any realm, with no Blob
  // or Response round trip.
  const stream = new DecompressionStream("deflate");
  const writer = stream.writable.getWriter();
  // Write and read concurrently; failures surface through the read side.
  // The copy pins the bytes to a plain ArrayBuffer, as the sink requires.
  void writer.write(new Uint8Array(data)).catch(() => undefined);
  void writer.close().catch(() => undefined);
  const reader = stream.readable.getReader();
  const chunks: Uint8Array[] = [];
  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    chunks.push(new Uint8Array(value as Uint8Array));
  }
  return concat(chunks);
}

// -- decoding --------------------------------------------------------------

function paeth(left: number, above: number, upperLeft: number): number {
  const p = left + above - upperLeft;
  const pa = Math.abs(p - left);
  const pb = Math.abs(p - above);
  const pc = Math.abs(p - upperLeft);
  if (pa <= pb && pa <= pc) return left;
  return pb <= pc ? above : upperLeft;
}

function unfilter(raw: Uint8Array, width: number, height: number, bpp: number): Uint8Array {
  const stride = width * bpp;
  if (raw.length !== height * (stride + 1)) {
    throw new Error("image data length does not match dimensions");
  }
  const out = new Uint8Array(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const rowIn = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const rowOut = out.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? out.subarray((y - 1) * stride, y * stride) : null;
    for (let x = 0; x < stride; x++) {
      const left = x >= bpp ? rowOut[x - bpp] : 0;
      const above = prev ? prev[x] : 0;
      const upperLeft = prev && x >= bpp ? prev[x - bpp] : 0;
      let value = rowIn[x];
      switch (filter) {
        case 0:
          break;
        case 1:
          value += left;
          break;
        case 2:
          value += above;
          break;
        case 3:
          value += (left + above) >> 1;
          break;
        case 4:
          value += paeth(left, above, upperLeft);
          break;
        default:
          throw new Error(`unsupported scanline filter ${filter}`);
      }
      rowOut[x] = value & 0xff;
    }
  }
  return out;
}

/** Decode an 8-bit truecolor PNG (color type 2 or 6, non-interlaced). */
export async function decodePng(bytes: Uint8Array): Promise<DecodedImage> {
  if (bytes.length < 8 || SIGNATURE.some((b, i) => bytes[i] !== b)) {
    throw new Error("not a PNG file");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  let offset = 8;
  let width = 0;
  let height = 0;
  let channels: 3 | 4 = 3;
  let sawHeader = false;
  const imageData: Uint8Array[] = [];

  while (offset + 8 <= bytes.length) {
    const length = view.getUint32(offset);
    const type = String.fromCharCode(...bytes.subarray(offset + 4, offset + 8));
    const data = bytes.subarray(offset + 8, offset + 8 + length);
    if (data.length !== length) throw new Error("truncated PNG chunk");
    offset += 12 + length;

    if (type === "IHDR") {
      const d = new DataView(data.buffer, data.byteOffset, data.byteLength);
      width = d.getUint32(0);
      height = d.getUint32(4);
      const bitDepth = data[8];
      const colorType = data[9];
      const interlace = data[12];
      if (bitDepth !== 8) throw new Error(`unsupported bit depth ${bitDepth}`);
      if (colorType === 2) channels = 3;
      else if (colorType === 6) channels = 4;
      else throw new Error(`unsupported color type ${colorType}`);
      if (interlace !== 0) throw new Error("interlaced PNGs are not supported");
      sawHeader = true;
    } else if (type === "IDAT") {
      imageData.push(data);
    } else if (type === "IEND") {
      break;
    }
  }
  if (!sawHeader || imageData.length === 0) throw new Error("PNG is missing image data");

  const raw = await inflate(concat(imageData));
  const pixels = unfilter(raw, width, height, channels);
  return { width, height, channels, pixels };
}

// -- encoding --------------------------------------------------------------

function chunk(type: string, data: Uint8Array): Uint8Array {
  const name = ascii(type);
  return concat([u32be(data.length), name, data, u32be(crc32(name, data))]);
}

/** Wrap raw bytes in a zlib stream of stored (uncompressed) deflate blocks. */
function storedZlib(data: Uint8Array): Uint8Array {
  const parts: Uint8Array[] = [new Uint8Array([0x78, 0x01])];
  const blockSize = 65535;
  const blockCount = Math.max(1, Math.ceil(data.length / blockSize));
  for (let i = 0; i < blockCount; i++) {
    const block = data.subarray(i * blockSize, Math.min((i + 1) * blockSize, data.length));
    const final = i === blockCount - 1 ? 1 : 0;
    const len = block.length;
    parts.push(new Uint8Array([final, len & 0xff, len >> 8, ~len & 0xff, (~len >> 8) & 0xff]));
    parts.push(block);
  }
  parts.push(u32be(adler32(data)));
  return concat(parts);
}

/** Encode 8-bit pixels (RGB or RGBA by `channels`) as a PNG. */
export function encodePng(width: number, height: number, channels: 3 | 4, pixels: Uint8Array): Uint8Array {
  if (pixels.length !== width * height * channels) {
    throw new Error("pixel buffer does not match dimensions");
  }
  const header = new Uint8Array(13);
  header.set(u32be(width), 0);
  header.set(u32be(height), 4);
  header[8] = 8; // bit depth
  header[9] = channels === 3 ? 2 : 6; // color type
  // bytes 10..12: compression, filter, interlace — all zero

  const stride = width * channels;
  const raw = new Uint8Array(height * (stride + 1));
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0; // filter: none
    raw.set(pixels.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }

  return concat([
    new Uint8Array(SIGNATURE),
    chunk("IHDR", header),
    chunk("IDAT", storedZlib(raw)),
    chunk("IEND", new Uint8Array(0)),
  ]);
}

/** Render bytes as a data: URL for direct use as an image source. */
export function pngDataUrl(bytes: Uint8Array): string {
  const alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  let out = "";
  for (let i = 0; i < bytes.length; i += 3) {
    const b0 = bytes[i];
    const b1 = i + 1 < bytes.length ? bytes[i + 1] : 0;
    const b2 = i + 2 < bytes.length ? bytes[i + 2] : 0;
    out += alphabet[b0 >> 2] + alphabet[((b0 & 3) << 4) | (b1 >> 4)];
    out += i + 1 < bytes.length ? alphabet[((b1 & 15) << 2) | (b2 >> 6)] : "=";
    out += i + 2 < bytes.length ? alphabet[b2 & 63] : "=";
  }
  return `data:image/png;base64,${out}`;
}
