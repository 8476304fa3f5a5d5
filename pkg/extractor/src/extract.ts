/**
 * Extraction job runner: a JSON-lines manifest of {id, image, text, labels}
 * instances goes in, an MMFS container comes out. Undecodable images skip
 * the record with a logged warning; re-running a job yields identical bytes.
 */

import { readFileSync } from 'node:fs';

import {
  ImagePatchEncoder,
  ObjectEncoder,
  StandinObjectEncoder,
  StandinPatchEncoder,
  StandinTextEncoder,
  TextEncoder,
} from './backbones';
import { DecodeError, decodeImage } from './image';
import { DatasetSpec, FeatureRecord, TrackData, TrackSpec, writeContainer } from './mmfs';

export interface ManifestLine {
  id: number;
  image: string;
  text: string;
  labels: number[];
}

export interface ExtractJob {
  manifestPath: string;
  outDir: string;
  backbones: string[]; // subset of clip, detr, text
  datasetName: string;
  labelNames?: string[];
  log?: (msg: string) => void;
}

export interface Encoders {
  clip: ImagePatchEncoder;
  detr: ObjectEncoder;
  text: TextEncoder;
}

export function defaultEncoders(): Encoders {
  return {
    clip: new StandinPatchEncoder(),
    detr: new StandinObjectEncoder(),
    text: new StandinTextEncoder(),
  };
}

export function readManifest(path: string): ManifestLine[] {
  const lines = readFileSync(path, 'utf-8').split('\n').filter((l) => l.trim().length);
  return lines.map((line, i) => {
    const parsed = JSON.parse(line);
    for (const key of ['id', 'image', 'text', 'labels']) {
      if (!(key in parsed)) throw new Error(`manifest line ${i + 1}: missing ${key}`);
    }
    return parsed as ManifestLine;
  });
}

export function trackSpecs(backbones: string[], enc: Encoders): TrackSpec[] {
  const specs: TrackSpec[] = [];
  if (backbones.includes('clip')) {
    specs.push({
      name: 'clip', kind: 'IMAGE_PATCH', dim: enc.clip.dim, max_len: 5,
      has_logits: false, logit_classes: 0, no_object_index: 0,
    });
  }
  if (backbones.includes('detr')) {
    specs.push({
      name: 'detr', kind: 'OBJECT', dim: enc.detr.dim, max_len: enc.detr.numBoxes,
      has_logits: true, logit_classes: enc.detr.logitClasses,
      no_object_index: enc.detr.noObjectIndex,
    });
  }
  if (backbones.includes('text')) {
    specs.push({
      name: 'text', kind: 'TEXT', dim: enc.text.dim, max_len: enc.text.maxTokens,
      has_logits: false, logit_classes: 0, no_object_index: 0,
    });
  }
  if (!specs.some((s) => s.kind === 'TEXT')) {
    throw new Error('the text backbone is always required');
  }
  return specs;
}

export function runJob(job: ExtractJob, encoders: Encoders = defaultEncoders()): {
  written: number;
  skipped: number;
} {
  const log = job.log ?? ((msg) => console.error(msg));
  const lines = readManifest(job.manifestPath);
  if (!lines.length) throw new Error('empty extraction manifest');
  const labelCount = lines[0].labels.length;
  const labelNames =
    job.labelNames ?? Array.from({ length: labelCount }, (_, i) => `label_${i}`);
  if (labelNames.length !== labelCount) {
    throw new Error(`label names (${labelNames.length}) != label vector (${labelCount})`);
  }
  const tracks = trackSpecs(job.backbones, encoders);
  const spec: DatasetSpec = {
    name: job.datasetName,
    label_names: labelNames,
    tasks: [{ name: 'all', labels: labelNames }],
    tracks,
  };

  const records: FeatureRecord[] = [];
  let skipped = 0;
  for (const line of lines) {
    let trackData: Map<string, TrackData>;
    try {
      trackData = extractTracks(line, tracks, encoders);
    } catch (e) {
      if (e instanceof DecodeError) {
        skipped++;
        log(`skipping record ${line.id}: ${e.message}`);
        continue;
      }
      throw e;
    }
    records.push({
      id: BigInt(line.id),
      labels: Uint8Array.from(line.labels),
      tracks: trackData,
    });
  }
  if (!records.length) throw new Error('no records survived extraction');
  writeContainer(spec, records, job.outDir);
  return { written: records.length, skipped };
}

function extractTracks(
  line: ManifestLine,
  tracks: TrackSpec[],
  enc: Encoders,
): Map<string, TrackData> {
  const out = new Map<string, TrackData>();
  const needsImage = tracks.some((t) => t.kind !== 'TEXT');
  const img = needsImage ? decodeImage(line.image) : null;
  for (const track of tracks) {
    if (track.kind === 'IMAGE_PATCH') {
      const tokens = enc.clip.encode(img!);
      out.set(track.name, {
        tokens, seqLen: 5, mask: new Uint8Array(5).fill(1),
      });
    } else if (track.kind === 'OBJECT') {
      const { features, logits } = enc.detr.encode(img!);
      out.set(track.name, {
        tokens: features,
        seqLen: enc.detr.numBoxes,
        mask: new Uint8Array(enc.detr.numBoxes).fill(1),
        logits,
      });
    } else {
      const { tokens, count, mask } = enc.text.encode(line.text);
      out.set(track.name, { tokens, seqLen: count, mask });
    }
  }
  return out;
}
