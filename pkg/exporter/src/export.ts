/**
 * Training + export driver: fits one architecture on a synthetic dataset and
 * writes the model, the probe-logit record, and a manifest whose trailing
 * hash covers every produced file.
 */
import * as tf from '@tensorflow/tfjs';
import { DatasetDef, dumpModel, sha256, writeFileAtomic } from './format';
import { CLASS_COUNT, IMAGE_SIZE } from './data';
import { Arch, BuiltModel, buildModel, extractModelDef } from './models';
import { Rng } from './rng';
import * as path from 'path';

export interface TrainConfig {
  arch: Arch;
  seed: number;
  epochs: number;
  learningRate: number;
  batchSize: number;
}

export interface FixtureManifest {
  lines: string[];
  hash: string;
  trainAccuracy: number;
  testAccuracy: number;
  modelBytes: Buffer;
}

export interface ProbeRecord {
  classId: number;
  testIndex: number;
  logits: number[];
}

function toTensor(ds: DatasetDef): { x: tf.Tensor4D; y: tf.Tensor1D } {
  const n = ds.labels.length;
  return {
    x: tf.tensor4d(ds.images, [n, IMAGE_SIZE, IMAGE_SIZE, 1]),
    y: tf.tensor1d(Int32Array.from(ds.labels), 'int32'),
  };
}

function shuffled(ds: DatasetDef, rng: Rng): DatasetDef {
  const n = ds.labels.length;
  const order = rng.shuffle(Array.from({ length: n }, (_, i) => i));
  const pixels = IMAGE_SIZE * IMAGE_SIZE;
  const images = new Float32Array(n * pixels);
  const labels = new Int32Array(n);
  order.forEach((src, dst) => {
    labels[dst] = ds.labels[src];
    images.set(ds.images.subarray(src * pixels, (src + 1) * pixels), dst * pixels);
  });
  return { ...ds, images, labels };
}

export function accuracy(built: BuiltModel, ds: DatasetDef): number {
  return tf.tidy(() => {
    const { x, y } = toTensor(ds);
    const preds = (built.logits.predict(x) as tf.Tensor2D).argMax(1);
    return preds.equal(y).mean().dataSync()[0];
  });
}

/** Logits of the first test example of every class, straight off the network. */
export function probeLogits(built: BuiltModel, test: DatasetDef): ProbeRecord[] {
  const probes: ProbeRecord[] = [];
  const pixels = IMAGE_SIZE * IMAGE_SIZE;
  for (let cls = 0; cls < CLASS_COUNT; cls++) {
    const testIndex = test.labels.indexOf(cls);
    if (testIndex < 0) throw new Error(`test split has no example of class ${cls}`);
    const logits = tf.tidy(() => {
      const x = tf.tensor4d(
        test.images.subarray(testIndex * pixels, (testIndex + 1) * pixels),
        [1, IMAGE_SIZE, IMAGE_SIZE, 1],
      );
      return Array.from((built.logits.predict(x) as tf.Tensor2D).dataSync());
    });
    probes.push({ classId: cls, testIndex, logits });
  }
  return probes;
}

export async function train(cfg: TrainConfig, trainDs: DatasetDef): Promise<BuiltModel> {
  const built = buildModel(cfg.arch, cfg.seed);
  built.model.compile({
    optimizer: tf.train.adam(cfg.learningRate),
    loss: 'sparseCategoricalCrossentropy',
  });
  const ordered = shuffled(trainDs, new Rng(cfg.seed * 7919 + 17));
  const { x, y: yInt } = toTensor(ordered);
  const y = yInt.toFloat(); // tfjs's sparse cross-entropy expects float labels
  yInt.dispose();
  try {
    // order is pre-shuffled above so the fit itself stays deterministic
    await built.model.fit(x, y, {
      epochs: cfg.epochs,
      batchSize: cfg.batchSize,
      shuffle: false,
      verbose: 0,
    });
  } finally {
    x.dispose();
    y.dispose();
  }
  return built;
}

export interface DatasetFileRef {
  fileName: string;
  hash: string;
}

export async function trainAndExport(
  cfg: TrainConfig,
  trainDs: DatasetDef,
  testDs: DatasetDef,
  datasetFiles: DatasetFileRef[],
  modelFileName: string,
  outDir: string,
): Promise<FixtureManifest> {
  const built = await train(cfg, trainDs);
  const modelBytes = dumpModel(extractModelDef(built));
  writeFileAtomic(path.join(outDir, modelFileName), modelBytes);

  const trainAccuracy = accuracy(built, trainDs);
  const testAccuracy = accuracy(built, testDs);
  const probes = probeLogits(built, testDs);

  const lines = [
    'CNNFIXTURE v1',
    `arch ${cfg.arch}`,
    `seed ${cfg.seed}`,
    `epochs ${cfg.epochs}`,
    `learning_rate ${cfg.learningRate}`,
    `batch_size ${cfg.batchSize}`,
    `train_accuracy ${trainAccuracy.toFixed(4)}`,
    `test_accuracy ${testAccuracy.toFixed(4)}`,
    `model ${modelFileName} sha256=${sha256(modelBytes)}`,
  ];
  for (const ref of datasetFiles) {
    lines.push(`dataset ${ref.fileName} sha256=${ref.hash}`);
  }
  for (const probe of probes) {
    const values = probe.logits.map((v) => v.toFixed(6)).join(' ');
    lines.push(`probe ${probe.classId} ${probe.testIndex} ${values}`);
  }
  const hash = sha256(Buffer.from(lines.join('\n') + '\n', 'utf-8'));
  lines.push(`manifest_sha256 ${hash}`);

  const manifestName = modelFileName.replace(/\.cnnmod$/, '') + '.manifest.txt';
  writeFileAtomic(path.join(outDir, manifestName), lines.join('\n') + '\n');
  built.model.dispose();
  return { lines, hash, trainAccuracy, testAccuracy, modelBytes };
}
