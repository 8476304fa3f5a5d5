/**
 * Image loading and quadrant slicing.
 *
 * Supports 8-bit PNG (via pngjs) and binary PPM (P6). An image is split into
 * four equal-size quadrants (2x2) by integer halving; a 2x2-pixel image
 * therefore yields one pixel per quadrant.
 */

import { readFileSync } from 'node:fs';
import { PNG } from 'pngjs';

export interface RgbImage {
  width: number;
  height: number;
  pixels: Uint8Array; // RGB, row-major
}

export class DecodeError extends Error {}

export function decodeImage(path: string): RgbImage {
  const data = readFileSync(path);
  if (data.length >= 8 && data.readUInt32BE(0) === 0x89504e47) {
    return decodePng(data);
  }
  if (data.length >= 2 && data.toString('ascii', 0, 2) === 'P6') {
    return decodePpm(data);
  }
  throw new DecodeError(`${path}: unsupported image format`);
}

function decodePng(data: Buffer): RgbImage {
  let png: PNG;
  try {
    png = PNG.sync.read(data);
  } catch (e) {
    throw new DecodeError(`PNG decode failed: ${e}`);
  }
  const pixels = new Uint8Array(png.width * png.height * 3);
  for (let i = 0; i < png.width * png.height; i++) {
    pixels[i * 3] = png.data[i * 4];
    pixels[i * 3 + 1] = png.data[i * 4 + 1];
    pixels[i * 3 + 2] = png.data[i * 4 + 2];
  }
  return { width: png.width, height: png.height, pixels };
}

function decodePpm(data: Buffer): RgbImage {
  // header: P6 <width> <height> <maxval>\n followed by binary RGB
  let pos = 0;
  const token = (): string => {
    while (pos < data.length && /\s/.test(String.fromCharCode(data[pos]))) pos++;
    if (data[pos] === 0x23) {
      while (pos < data.length && data[pos] !== 0x0a) pos++;
      return token();
    }
    const start = pos;
    while (pos < data.length && !/\s/.test(String.fromCharCode(data[pos]))) pos++;
    return data.toString('ascii', start, pos);
  };
  if (token() !== 'P6') throw new DecodeError('not a P6 PPM');
  const width = parseInt(token(), 10);
  const height = parseInt(token(), 10);
  const maxval = parseInt(token(), 10);
  pos++; // single whitespace after maxval
  if (!(width > 0 && height > 0) || maxval !== 255) {
    throw new DecodeError('unsupported PPM header');
  }
  const need = width * height * 3;
  if (data.length - pos < need) throw new DecodeError('truncated PPM payload');
  return { width, height, pixels: Uint8Array.from(data.subarray(pos, pos + need)) };
}

export interface Region {
  x: number;
  y: number;
  width: number;
  height: number;
}

export function wholeRegion(img: RgbImage): Region {
  return { x: 0, y: 0, width: img.width, height: img.height };
}

/** Quadrants in row-major order: top-left, top-right, bottom-left, bottom-right. */
export function quadrants(img: RgbImage): Region[] {
  const w2 = Math.floor(img.width / 2);
  const h2 = Math.floor(img.height / 2);
  if (w2 === 0 || h2 === 0) throw new DecodeError('image too small to split 2x2');
  return [
    { x: 0, y: 0, width: w2, height: h2 },
    { x: w2, y: 0, width: img.width - w2, height: h2 },
    { x: 0, y: h2, width: w2, height: img.height - h2 },
    { x: w2, y: h2, width: img.width - w2, height: img.height - h2 },
  ];
}

const STATS_GRID = 4;

/**
 * Deterministic content summary of a region: per-channel means plus a
 * STATS_GRID^2 average-pooled luma grid, all in [0, 1].
 */
export function regionStats(img: RgbImage, region: Region): Float64Array {
  const out = new Float64Array(3 + STATS_GRID * STATS_GRID);
  const counts = new Float64Array(STATS_GRID * STATS_GRID);
  for (let dy = 0; dy < region.height; dy++) {
    for (let dx = 0; dx < region.width; dx++) {
      const idx = ((region.y + dy) * img.width + (region.x + dx)) * 3;
      const r = img.pixels[idx] / 255;
      const g = img.pixels[idx + 1] / 255;
      const b = img.pixels[idx + 2] / 255;
      out[0] += r;
      out[1] += g;
      out[2] += b;
      const gy = Math.min(STATS_GRID - 1, Math.floor((dy * STATS_GRID) / region.height));
      const gx = Math.min(STATS_GRID - 1, Math.floor((dx * STATS_GRID) / region.width));
      const cell = gy * STATS_GRID + gx;
      out[3 + cell] += 0.299 * r + 0.587 * g + 0.114 * b;
      counts[cell]++;
    }
  }
  const total = region.width * region.height;
  out[0] /= total;
  out[1] /= total;
  out[2] /= total;
  for (let c = 0; c < counts.length; c++) {
    out[3 + c] = counts[c] ? out[3 + c] / counts[c] : 0;
  }
  return out;
}

export function lumaVariance(img: RgbImage): number {
  let sum = 0;
  let sumsq = 0;
  const n = img.width * img.height;
  for (let i = 0; i < n; i++) {
    const l =
      (0.299 * img.pixels[i * 3] + 0.587 * img.pixels[i * 3 + 1] + 0.114 * img.pixels[i * 3 + 2]) /
      255;
    sum += l;
    sumsq += l * l;
  }
  const mean = sum / n;
  return Math.max(0, sumsq / n - mean * mean);
}
