/**
 * Tiny CNN architectures built with tfjs and their translation into the
 * portable layer-graph layout.
 *
 * tfjs already stores conv kernels as [kh, kw, c_in, c_out] and dense
 * kernels as [n_in, n_out], which is exactly the layout the `.cnnmod`
 * format expects, so extraction is a straight copy.
 */
import * as tf from '@tensorflow/tfjs';
import { LayerDef, ModelDef } from './format';
import { CLASS_COUNT, IMAGE_SIZE } from './data';

export type Arch = 'PlainCNN' | 'TinyResNet';

export interface BuiltModel {
  arch: Arch;
  /** full network ending in softmax, used for training */
  model: tf.LayersModel;
  /** same weights, output taken before the softmax */
  logits: tf.LayersModel;
}

function conv(filters: number, seed: number, name: string) {
  return tf.layers.conv2d({
    filters,
    kernelSize: 3,
    padding: 'same',
    activation: 'linear',
    kernelInitializer: tf.initializers.heNormal({ seed }),
    biasInitializer: 'zeros',
    name,
  });
}

function dense(units: number, seed: number, name: string) {
  return tf.layers.dense({
    units,
    activation: 'linear',
    kernelInitializer: tf.initializers.glorotUniform({ seed }),
    biasInitializer: 'zeros',
    name,
  });
}

export function buildPlainCnn(seed: number): BuiltModel {
  const input = tf.input({ shape: [IMAGE_SIZE, IMAGE_SIZE, 1] });
  let x = conv(8, seed + 1, 'conv1').apply(input) as tf.SymbolicTensor;
  x = tf.layers.reLU().apply(x) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 2 }).apply(x) as tf.SymbolicTensor;
  x = conv(16, seed + 2, 'conv2').apply(x) as tf.SymbolicTensor;
  x = tf.layers.reLU().apply(x) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ poolSize: 2 }).apply(x) as tf.SymbolicTensor;
  x = tf.layers.flatten().apply(x) as tf.SymbolicTensor;
  x = dense(32, seed + 3, 'fc1').apply(x) as tf.SymbolicTensor;
  x = tf.layers.reLU().apply(x) as tf.SymbolicTensor;
  const logits = dense(CLASS_COUNT, seed + 4, 'fc2').apply(x) as tf.SymbolicTensor;
  const probs = tf.layers.softmax().apply(logits) as tf.SymbolicTensor;
  return {
    arch: 'PlainCNN',
    model: tf.model({ inputs: input, outputs: probs }),
    logits: tf.model({ inputs: input, outputs: logits }),
  };
}

export function buildTinyResNet(seed: number): BuiltModel {
  const input = tf.input({ shape: [IMAGE_SIZE, IMAGE_SIZE, 1] });
  const stem = conv(8, seed + 1, 'conv1').apply(input) as tf.SymbolicTensor;
  const stemRelu = tf.layers.reLU().apply(stem) as tf.SymbolicTensor;
  let x = conv(8, seed + 2, 'conv2').apply(stemRelu) as tf.SymbolicTensor;
  x = tf.layers.reLU().apply(x) as tf.SymbolicTensor;
  x = conv(8, seed + 3, 'conv3').apply(x) as tf.SymbolicTensor;
  x = tf.layers.add().apply([x, stemRelu]) as tf.SymbolicTensor;
  x = tf.layers.reLU().apply(x) as tf.SymbolicTensor;
  x = tf.layers.averagePooling2d({ poolSize: 2 }).apply(x) as tf.SymbolicTensor;
  x = tf.layers.flatten().apply(x) as tf.SymbolicTensor;
  const logits = dense(CLASS_COUNT, seed + 4, 'fc1').apply(x) as tf.SymbolicTensor;
  const probs = tf.layers.softmax().apply(logits) as tf.SymbolicTensor;
  return {
    arch: 'TinyResNet',
    model: tf.model({ inputs: input, outputs: probs }),
    logits: tf.model({ inputs: input, outputs: logits }),
  };
}

export function buildModel(arch: Arch, seed: number): BuiltModel {
  return arch === 'PlainCNN' ? buildPlainCnn(seed) : buildTinyResNet(seed);
}

function layerWeights(model: tf.LayersModel, name: string): [Float32Array, Float32Array] {
  const [kernel, bias] = model.getLayer(name).getWeights();
  return [kernel.dataSync() as Float32Array, bias.dataSync() as Float32Array];
}

/** Translate the trained tfjs network into the portable layer graph. */
export function extractModelDef(built: BuiltModel): ModelDef {
  const layers: LayerDef[] = [];
  const convLayer = (name: string, cIn: number, cOut: number, from: number): LayerDef => {
    const [kernel, bias] = layerWeights(built.model, name);
    return {
      kind: 'conv2d', inputs: [from], kh: 3, kw: 3, cIn, cOut,
      stride: 1, padding: 'with', kernel, bias,
    };
  };
  const denseLayer = (name: string, nIn: number, nOut: number, from: number): LayerDef => {
    const [weights, bias] = layerWeights(built.model, name);
    return { kind: 'dense', inputs: [from], nIn, nOut, weights, bias };
  };

  if (built.arch === 'PlainCNN') {
    layers.push(
      convLayer('conv1', 1, 8, -1),
      { kind: 'relu', inputs: [0] },
      { kind: 'maxpool', inputs: [1], pool: 2 },
      convLayer('conv2', 8, 16, 2),
      { kind: 'relu', inputs: [3] },
      { kind: 'maxpool', inputs: [4], pool: 2 },
      { kind: 'flatten', inputs: [5] },
      denseLayer('fc1', 64, 32, 6),
      { kind: 'relu', inputs: [7] },
      denseLayer('fc2', 32, CLASS_COUNT, 8),
      { kind: 'softmax', inputs: [9] },
    );
  } else {
    layers.push(
      convLayer('conv1', 1, 8, -1),
      { kind: 'relu', inputs: [0] },
      convLayer('conv2', 8, 8, 1),
      { kind: 'relu', inputs: [2] },
      convLayer('conv3', 8, 8, 3),
      { kind: 'add', inputs: [4, 1] },
      { kind: 'relu', inputs: [5] },
      { kind: 'avgpool', inputs: [6], pool: 2 },
      { kind: 'flatten', inputs: [7] },
      denseLayer('fc1', 128, CLASS_COUNT, 8),
      { kind: 'softmax', inputs: [9] },
    );
  }
  return { layers, inputShape: [IMAGE_SIZE, IMAGE_SIZE, 1], classCount: CLASS_COUNT };
}
