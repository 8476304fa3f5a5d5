/**
 * extract --manifest m.jsonl --out dir [--backbones clip,detr,text]
 *         [--name dataset] [--labels a,b,c]
 *
 * The manifest is JSON-lines with id, image, text, labels per instance.
 */

import { runJob } from './extract';

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith('--') || i + 1 >= argv.length) {
      throw new Error(`usage error near ${key}`);
    }
    out.set(key.slice(2), argv[i + 1]);
  }
  return out;
}

export function main(argv: string[]): number {
  let args: Map<string, string>;
  try {
    args = parseArgs(argv);
    for (const required of ['manifest', 'out']) {
      if (!args.has(required)) throw new Error(`missing --${required}`);
    }
  } catch (e) {
    console.error(JSON.stringify({ error: 'usage', message: String(e) }));
    return 2;
  }
  try {
    const result = runJob({
      manifestPath: args.get('manifest')!,
      outDir: args.get('out')!,
      backbones: (args.get('backbones') ?? 'clip,detr,text').split(','),
      datasetName: args.get('name') ?? 'extracted',
      labelNames: args.get('labels')?.split(','),
    });
    console.log(JSON.stringify(result));
    return 0;
  } catch (e) {
    console.error(JSON.stringify({ error: 'extract-failed', message: String(e) }));
    return 1;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
