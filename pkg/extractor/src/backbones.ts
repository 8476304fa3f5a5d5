/**
 * Backbone encoders behind small interfaces.
 *
 * The deterministic stand-in implementations below derive features from
 * image content statistics and token hashes through fixed seeded
 * projections, so extraction is reproducible byte-for-byte and
 * content-sensitive without any model weights. Real pretrained encoders can
 * be dropped in behind the same interfaces.
 */

import { createHash } from 'node:crypto';
import { RgbImage, lumaVariance, quadrants, regionStats, wholeRegion } from './image';

export function seedFrom(...parts: (string | Buffer | Uint8Array)[]): bigint {
  const h = createHash('sha256');
  for (const p of parts) h.update(p);
  return h.digest().readBigUInt64LE(0);
}

const MASK64 = 0xffffffffffffffffn;

/** splitmix64: fast deterministic stream of floats in [0, 1). */
export function splitmix64(seed: bigint): () => number {
  let state = seed & MASK64;
  return () => {
    state = (state + 0x9e3779b97f4a7c15n) & MASK64;
    let z = state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
    z = z ^ (z >> 31n);
    return Number(z >> 11n) / 2 ** 53;
  };
}

/** Fixed random projection of a stats vector, squashed by tanh. */
function project(tag: string, stats: Float64Array, dim: number): Float32Array {
  const next = splitmix64(seedFrom(tag));
  const out = new Float32Array(dim);
  for (let j = 0; j < dim; j++) {
    let acc = 0;
    for (let i = 0; i < stats.length; i++) {
      acc += (2 * next() - 1) * stats[i];
    }
    out[j] = Math.fround(Math.tanh(2 * acc));
  }
  return out;
}

function seededVector(seed: bigint, dim: number): Float32Array {
  const next = splitmix64(seed);
  const out = new Float32Array(dim);
  for (let j = 0; j < dim; j++) out[j] = Math.fround(2 * next() - 1);
  return out;
}

export interface ImagePatchEncoder {
  readonly dim: number;
  /** Row 0 is the whole image; rows 1-4 the 2x2 quadrants in row-major order. */
  encode(img: RgbImage): Float32Array; // (5, dim)
}

export interface ObjectEncoder {
  readonly dim: number;
  readonly numBoxes: number;
  readonly logitClasses: number;
  readonly noObjectIndex: number;
  /** Raw box features and classifier logits; no masking applied here. */
  encode(img: RgbImage): { features: Float32Array; logits: Float32Array };
}

export interface TextEncoder {
  readonly dim: number;
  readonly maxTokens: number;
  encode(text: string): { tokens: Float32Array; count: number; mask: Uint8Array };
}

export class StandinPatchEncoder implements ImagePatchEncoder {
  constructor(readonly dim: number = 640) {}

  encode(img: RgbImage): Float32Array {
    const out = new Float32Array(5 * this.dim);
    const regions = [wholeRegion(img), ...quadrants(img)];
    regions.forEach((region, row) => {
      const feat = project('clip-projection', regionStats(img, region), this.dim);
      out.set(feat, row * this.dim);
    });
    return out;
  }
}

export class StandinObjectEncoder implements ObjectEncoder {
  readonly numBoxes = 100;
  readonly logitClasses = 92;
  readonly noObjectIndex = 91;

  constructor(readonly dim: number = 256, private noObjectFraction = 0.4) {}

  encode(img: RgbImage): { features: Float32Array; logits: Float32Array } {
    const stats = regionStats(img, wholeRegion(img));
    const content = project('detr-projection', stats, this.dim);
    const imageSeed = seedFrom('detr-image', Buffer.from(img.pixels));
    const blank = lumaVariance(img) === 0;
    const features = new Float32Array(this.numBoxes * this.dim);
    const logits = new Float32Array(this.numBoxes * this.logitClasses);
    for (let box = 0; box < this.numBoxes; box++) {
      const next = splitmix64(seedFrom('detr-box', imageSeed.toString(16), String(box)));
      for (let j = 0; j < this.dim; j++) {
        features[box * this.dim + j] = Math.fround(
          0.5 * (2 * next() - 1) + 0.5 * content[j]
        );
      }
      for (let c = 0; c < this.logitClasses; c++) {
        logits[box * this.logitClasses + c] = Math.fround(2 * next() - 1);
      }
      // blank images have no objects at all: the core's top-4 fallback fires
      const noObject = blank || next() < this.noObjectFraction;
      const winner = noObject
        ? this.noObjectIndex
        : Math.floor(next() * (this.logitClasses - 1));
      logits[box * this.logitClasses + winner] = 3.0;
    }
    return { features, logits };
  }
}

export class StandinTextEncoder implements TextEncoder {
  readonly dim = 768;
  readonly maxTokens = 120;

  encode(text: string): { tokens: Float32Array; count: number; mask: Uint8Array } {
    const words = tokenize(text).slice(0, this.maxTokens);
    // an empty input still emits one (valid) pad row so the sequence is never empty
    const pieces = words.length ? words : ['[PAD]'];
    const tokens = new Float32Array(pieces.length * this.dim);
    pieces.forEach((word, i) => {
      const vec = seededVector(seedFrom('text-token', word, String(i)), this.dim);
      tokens.set(vec, i * this.dim);
    });
    const mask = new Uint8Array(pieces.length).fill(1);
    return { tokens, count: pieces.length, mask };
  }
}

export function tokenize(text: string): string[] {
  return text
    .toLowerCase()
    .split(/[^a-z0-9']+/)
    .filter((w) => w.length > 0);
}
