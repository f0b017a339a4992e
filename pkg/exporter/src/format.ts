/**
 * Writers for the portable `.cnnmod` / `.cnnds` binary formats.
 *
 * Both formats are a UTF-8 key-value header terminated by an `end_header`
 * line, followed by one binary blob.  Floats are little-endian float32,
 * labels little-endian int32, and blob locations appear in the header as
 * `<byte offset>:<element count>`.
 */
import * as crypto from 'crypto';
import * as fs from 'fs';
import * as path from 'path';

export type Padding = 'with' | 'zero';

export interface ConvLayer {
  kind: 'conv2d';
  inputs: number[];
  kh: number;
  kw: number;
  cIn: number;
  cOut: number;
  stride: number;
  padding: Padding;
  kernel: Float32Array; // [kh, kw, cIn, cOut] row-major
  bias: Float32Array;   // [cOut]
}

export interface DenseLayer {
  kind: 'dense';
  inputs: number[];
  nIn: number;
  nOut: number;
  weights: Float32Array; // [nIn, nOut] row-major
  bias: Float32Array;    // [nOut]
}

export interface PoolLayer {
  kind: 'maxpool' | 'avgpool';
  inputs: number[];
  pool: number;
}

export interface SimpleLayer {
  kind: 'flatten' | 'add' | 'relu' | 'softmax';
  inputs: number[];
}

export type LayerDef = ConvLayer | DenseLayer | PoolLayer | SimpleLayer;

export interface ModelDef {
  layers: LayerDef[];
  inputShape: [number, number, number];
  classCount: number;
}

export interface DatasetDef {
  name: string;
  split: 'train' | 'test';
  classCount: number;
  shape: [number, number, number];
  images: Float32Array; // [n * h * w * c] row-major
  labels: Int32Array;   // [n]
}

function f32Bytes(values: Float32Array): Buffer {
  const buf = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) buf.writeFloatLE(values[i], i * 4);
  return buf;
}

function i32Bytes(values: Int32Array): Buffer {
  const buf = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) buf.writeInt32LE(values[i], i * 4);
  return buf;
}

export function dumpModel(model: ModelDef): Buffer {
  const blobs: Buffer[] = [];
  let offset = 0;
  const put = (values: Float32Array): string => {
    const span = `${offset}:${values.length}`;
    blobs.push(f32Bytes(values));
    offset += values.length * 4;
    return span;
  };

  const lines: string[] = [
    'CNNMOD v1',
    `input_shape ${model.inputShape.join(' ')}`,
    `class_count ${model.classCount}`,
    `layer_count ${model.layers.length}`,
  ];
  model.layers.forEach((layer, i) => {
    const parts = [`layer ${i} kind=${layer.kind}`, `inputs=${layer.inputs.join(',')}`];
    if (layer.kind === 'conv2d') {
      if (layer.kernel.length !== layer.kh * layer.kw * layer.cIn * layer.cOut) {
        throw new Error(`conv layer ${i}: kernel length mismatch`);
      }
      parts.push(
        `kh=${layer.kh}`, `kw=${layer.kw}`, `c_in=${layer.cIn}`, `c_out=${layer.cOut}`,
        `stride=${layer.stride}`, `padding=${layer.padding}`,
        `weights=${put(layer.kernel)}`, `bias=${put(layer.bias)}`,
      );
    } else if (layer.kind === 'dense') {
      if (layer.weights.length !== layer.nIn * layer.nOut) {
        throw new Error(`dense layer ${i}: weights length mismatch`);
      }
      parts.push(
        `n_in=${layer.nIn}`, `n_out=${layer.nOut}`,
        `weights=${put(layer.weights)}`, `bias=${put(layer.bias)}`,
      );
    } else if (layer.kind === 'maxpool' || layer.kind === 'avgpool') {
      parts.push(`pool=${layer.pool}`);
    }
    lines.push(parts.join(' '));
  });
  const header = Buffer.from(lines.join('\n') + '\nend_header\n', 'utf-8');
  return Buffer.concat([header, ...blobs]);
}

export function dumpDataset(ds: DatasetDef): Buffer {
  if (/\s/.test(ds.name)) throw new Error(`dataset name ${ds.name} contains whitespace`);
  const [h, w, c] = ds.shape;
  const n = ds.labels.length;
  if (ds.images.length !== n * h * w * c) {
    throw new Error(`dataset ${ds.name}: image buffer does not match count*shape`);
  }
  const labels = i32Bytes(ds.labels);
  const images = f32Bytes(ds.images);
  const header = Buffer.from(
    [
      'CNNDS v1',
      `name ${ds.name}`,
      `split ${ds.split}`,
      `class_count ${ds.classCount}`,
      `count ${n}`,
      `shape ${h} ${w} ${c}`,
      `labels 0:${ds.labels.length}`,
      `images ${labels.length}:${ds.images.length}`,
    ].join('\n') + '\nend_header\n',
    'utf-8',
  );
  return Buffer.concat([header, labels, images]);
}

export function sha256(data: Buffer): string {
  return crypto.createHash('sha256').update(data).digest('hex');
}

/** Write via temp file + rename so partially written fixtures never appear. */
export function writeFileAtomic(filePath: string, data: Buffer | string): void {
  const dir = path.dirname(path.resolve(filePath));
  const tmp = path.join(dir, `.tmp-${process.pid}-${path.basename(filePath)}`);
  fs.writeFileSync(tmp, data);
  fs.renameSync(tmp, filePath);
}
