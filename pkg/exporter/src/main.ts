/**
 * Produces the full fixture set consumed by the decomposition engine's tests:
 *
 *   syntha.{train,test}.cnnds   500/50 images per class, pattern family A
 *   synthb.{train,test}.cnnds   100/20 images per class, pattern family B
 *   plain-a.cnnmod              PlainCNN trained on synthA
 *   plain-a-weak.cnnmod         same architecture, deliberately undertrained
 *   resnet-a.cnnmod             TinyResNet (Add layer) trained on synthA
 *   plain-b.cnnmod              PlainCNN trained on synthB
 *   *.manifest.txt              per-model probe logits + file hashes
 *
 * Usage: node dist/main.js [out-dir]   (default ../fixtures)
 */
import * as path from 'path';
import * as fs from 'fs';
import { makeDataset } from './data';
import { DatasetDef, dumpDataset, sha256, writeFileAtomic } from './format';
import { DatasetFileRef, TrainConfig, trainAndExport } from './export';

function writeDatasetPair(outDir: string, baseName: string,
                          pair: { train: DatasetDef; test: DatasetDef }): DatasetFileRef[] {
  const refs: DatasetFileRef[] = [];
  for (const split of ['train', 'test'] as const) {
    const fileName = `${baseName}.${split}.cnnds`;
    const bytes = dumpDataset(pair[split]);
    writeFileAtomic(path.join(outDir, fileName), bytes);
    refs.push({ fileName, hash: sha256(bytes) });
  }
  return refs;
}

async function main(): Promise<void> {
  const outDir = path.resolve(process.argv[2] ?? path.join(__dirname, '..', '..', 'fixtures'));
  fs.mkdirSync(outDir, { recursive: true });

  const synthA = makeDataset({
    name: 'syntha', variant: 'a', seed: 101, perClassTrain: 500, perClassTest: 50,
  });
  const synthB = makeDataset({
    name: 'synthb', variant: 'b', seed: 202, perClassTrain: 100, perClassTest: 20,
  });
  const refsA = writeDatasetPair(outDir, 'syntha', synthA);
  const refsB = writeDatasetPair(outDir, 'synthb', synthB);
  console.log(`wrote datasets to ${outDir}`);

  const jobs: Array<[TrainConfig, DatasetDef, DatasetDef, DatasetFileRef[], string]> = [
    [{ arch: 'PlainCNN', seed: 11, epochs: 6, learningRate: 0.01, batchSize: 64 },
     synthA.train, synthA.test, refsA, 'plain-a.cnnmod'],
    [{ arch: 'PlainCNN', seed: 12, epochs: 1, learningRate: 0.002, batchSize: 256 },
     synthA.train, synthA.test, refsA, 'plain-a-weak.cnnmod'],
    [{ arch: 'TinyResNet', seed: 13, epochs: 6, learningRate: 0.01, batchSize: 64 },
     synthA.train, synthA.test, refsA, 'resnet-a.cnnmod'],
    [{ arch: 'PlainCNN', seed: 14, epochs: 8, learningRate: 0.01, batchSize: 64 },
     synthB.train, synthB.test, refsB, 'plain-b.cnnmod'],
  ];
  for (const [cfg, trainDs, testDs, refs, fileName] of jobs) {
    const started = Date.now();
    const manifest = await trainAndExport(cfg, trainDs, testDs, refs, fileName, outDir);
    console.log(
      `${fileName}: train acc ${manifest.trainAccuracy.toFixed(4)}, ` +
      `test acc ${manifest.testAccuracy.toFixed(4)}, ` +
      `${((Date.now() - started) / 1000).toFixed(1)}s, manifest ${manifest.hash.slice(0, 12)}`,
    );
  }
}

main().catch((err) => {
  console.error(err);
  process.exit(1);
});
