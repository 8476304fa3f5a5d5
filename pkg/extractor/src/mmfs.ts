/**
 * MMFS container writer (and a reader for self-checks).
 *
 * Layout, little-endian throughout:
 *   manifest.json : dataset name, label_names, tasks, tracks, record_count,
 *                   checksum_sha256 of records.bin
 *   records.bin   : magic "MMFS", u16 version=1, then per record:
 *                   u64 id; u8 x label_count labels; per track in manifest
 *                   order: u16 seq_len, f32 x (seq_len*dim) row-major tokens,
 *                   u8 x seq_len mask, and if has_logits
 *                   f32 x (seq_len*logit_classes) logits.
 */

import { createHash } from 'node:crypto';
import { mkdirSync, readFileSync, writeFileSync } from 'node:fs';
import { join } from 'node:path';

export const MAGIC = 'MMFS';
export const VERSION = 1;

export type TrackKind = 'IMAGE_PATCH' | 'OBJECT' | 'TEXT';

export interface TrackSpec {
  name: string;
  kind: TrackKind;
  dim: number;
  max_len: number;
  has_logits: boolean;
  logit_classes: number;
  no_object_index: number;
}

export interface TaskSpec {
  name: string;
  labels: string[];
}

export interface DatasetSpec {
  name: string;
  label_names: string[];
  tasks: TaskSpec[];
  tracks: TrackSpec[];
}

export interface TrackData {
  tokens: Float32Array; // row-major (seqLen, dim)
  seqLen: number;
  mask: Uint8Array;
  logits?: Float32Array; // (seqLen, logit_classes)
}

export interface FeatureRecord {
  id: bigint;
  labels: Uint8Array;
  tracks: Map<string, TrackData>;
}

export function validateRecord(spec: DatasetSpec, rec: FeatureRecord): void {
  const bad = (msg: string) => {
    throw new Error(`record ${rec.id}: ${msg}`);
  };
  if (rec.labels.length !== spec.label_names.length) {
    bad(`labels length ${rec.labels.length} != ${spec.label_names.length}`);
  }
  for (const v of rec.labels) if (v !== 0 && v !== 1) bad('labels must be binary');
  for (const track of spec.tracks) {
    const td = rec.tracks.get(track.name);
    if (!td) bad(`missing track ${track.name}`);
    const n = td!.seqLen;
    if (n < 1 || n > track.max_len) bad(`track ${track.name}: seq_len ${n} outside [1, ${track.max_len}]`);
    if (td!.tokens.length !== n * track.dim) bad(`track ${track.name}: tokens size`);
    if (td!.mask.length !== n) bad(`track ${track.name}: mask length`);
    if (track.kind !== 'OBJECT') {
      let valid = 0;
      for (const m of td!.mask) valid += m;
      if (valid < 1) bad(`track ${track.name}: needs at least one valid token`);
    }
    if (track.has_logits) {
      if (!td!.logits || td!.logits.length !== n * track.logit_classes) {
        bad(`track ${track.name}: logits missing or misshaped`);
      }
    } else if (td!.logits) {
      bad(`track ${track.name}: unexpected logits`);
    }
  }
}

export function encodeRecords(spec: DatasetSpec, records: FeatureRecord[]): Buffer {
  const chunks: Buffer[] = [];
  chunks.push(Buffer.from(MAGIC, 'ascii'));
  const version = Buffer.alloc(2);
  version.writeUInt16LE(VERSION);
  chunks.push(version);
  for (const rec of records) {
    validateRecord(spec, rec);
    const id = Buffer.alloc(8);
    id.writeBigUInt64LE(rec.id);
    chunks.push(id);
    chunks.push(Buffer.from(rec.labels));
    for (const track of spec.tracks) {
      const td = rec.tracks.get(track.name)!;
      const len = Buffer.alloc(2);
      len.writeUInt16LE(td.seqLen);
      chunks.push(len);
      chunks.push(floatsLE(td.tokens));
      chunks.push(Buffer.from(td.mask));
      if (track.has_logits) chunks.push(floatsLE(td.logits!));
    }
  }
  return Buffer.concat(chunks);
}

function floatsLE(values: Float32Array): Buffer {
  const buf = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) buf.writeFloatLE(values[i], i * 4);
  return buf;
}

export function writeContainer(spec: DatasetSpec, records: FeatureRecord[], outDir: string): void {
  mkdirSync(outDir, { recursive: true });
  const payload = encodeRecords(spec, records);
  writeFileSync(join(outDir, 'records.bin'), payload);
  const manifest = {
    name: spec.name,
    label_names: spec.label_names,
    tasks: spec.tasks,
    tracks: spec.tracks,
    record_count: records.length,
    checksum_sha256: createHash('sha256').update(payload).digest('hex'),
  };
  writeFileSync(join(outDir, 'manifest.json'), JSON.stringify(manifest, null, 1) + '\n');
}

/** Minimal reader used by the test suite to round-trip containers. */
export function readContainer(dir: string): { spec: DatasetSpec; records: FeatureRecord[] } {
  const manifest = JSON.parse(readFileSync(join(dir, 'manifest.json'), 'utf-8'));
  const payload = readFileSync(join(dir, 'records.bin'));
  const checksum = createHash('sha256').update(payload).digest('hex');
  if (checksum !== manifest.checksum_sha256) throw new Error('checksum mismatch');
  let pos = 0;
  const take = (n: number): Buffer => {
    if (pos + n > payload.length) throw new Error(`truncated at ${pos}`);
    const out = payload.subarray(pos, pos + n);
    pos += n;
    return out;
  };
  if (take(4).toString('ascii') !== MAGIC) throw new Error('bad magic');
  if (take(2).readUInt16LE() !== VERSION) throw new Error('bad version');
  const spec: DatasetSpec = {
    name: manifest.name,
    label_names: manifest.label_names,
    tasks: manifest.tasks ?? [],
    tracks: manifest.tracks,
  };
  const records: FeatureRecord[] = [];
  for (let r = 0; r < manifest.record_count; r++) {
    const id = take(8).readBigUInt64LE();
    const labels = Uint8Array.from(take(spec.label_names.length));
    const tracks = new Map<string, TrackData>();
    for (const track of spec.tracks) {
      const n = take(2).readUInt16LE();
      const tokens = new Float32Array(n * track.dim);
      const tbuf = take(4 * tokens.length);
      for (let i = 0; i < tokens.length; i++) tokens[i] = tbuf.readFloatLE(i * 4);
      const mask = Uint8Array.from(take(n));
      let logits: Float32Array | undefined;
      if (track.has_logits) {
        logits = new Float32Array(n * track.logit_classes);
        const lbuf = take(4 * logits.length);
        for (let i = 0; i < logits.length; i++) logits[i] = lbuf.readFloatLE(i * 4);
      }
      tracks.set(track.name, { tokens, seqLen: n, mask, logits });
    }
    records.push({ id, labels, tracks });
  }
  if (pos !== payload.length) throw new Error('trailing bytes');
  return { spec, records };
}
