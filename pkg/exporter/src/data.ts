/**
 * Seeded synthetic image datasets: 10 classes of 8x8 grayscale patterns.
 *
 * Each class is a distinct geometric template drawn on the inner 6x6 region
 * (the 1-pixel border stays exactly zero), modulated by a random intensity
 * and pixel noise.  Pixels are normalized to [0, 1].  Variant "b" uses the
 * transposed templates under a shifted class mapping, so the two dataset
 * families are related but not interchangeable.
 */
import { DatasetDef } from './format';
import { Rng } from './rng';

export const IMAGE_SIZE = 8;
export const CLASS_COUNT = 10;

export type Variant = 'a' | 'b';

export interface DatasetSpec {
  name: string;
  variant: Variant;
  seed: number;
  perClassTrain: number;
  perClassTest: number;
}

/** 1 where the class template paints the pixel, 0 elsewhere (8x8 row-major). */
export function classTemplate(classId: number, variant: Variant): Uint8Array {
  const id = variant === 'a' ? classId : (classId + 3) % CLASS_COUNT;
  const mask = new Uint8Array(IMAGE_SIZE * IMAGE_SIZE);
  const paint = (r: number, c: number) => {
    if (variant === 'b') [r, c] = [c, r];
    mask[r * IMAGE_SIZE + c] = 1;
  };
  for (let r = 1; r <= 6; r++) {
    for (let c = 1; c <= 6; c++) {
      let on = false;
      switch (id) {
        case 0: on = r === 2 || r === 3; break;                       // horizontal bar
        case 1: on = c === 2 || c === 3; break;                       // vertical bar
        case 2: on = r === c; break;                                  // diagonal
        case 3: on = r + c === 7; break;                              // anti-diagonal
        case 4: on = r >= 3 && r <= 4 && c >= 3 && c <= 4; break;     // center block
        case 5: on = (r <= 2 || r >= 5) && (c <= 2 || c >= 5); break; // four corners
        case 6: on = r === 1 || r === 6; break;                       // top+bottom bars
        case 7: on = (r + c) % 2 === 0; break;                        // checkerboard
        case 8: on = c <= 3; break;                                   // left half
        case 9: on = r === 1 || r === 6 || c === 1 || c === 6; break; // ring
      }
      if (on) paint(r, c);
    }
  }
  return mask;
}

function renderExample(classId: number, variant: Variant, rng: Rng,
                       out: Float32Array, offset: number): void {
  const template = classTemplate(classId, variant);
  const intensity = rng.uniform(0.65, 1.0);
  for (let r = 0; r < IMAGE_SIZE; r++) {
    for (let c = 0; c < IMAGE_SIZE; c++) {
      const i = r * IMAGE_SIZE + c;
      let value = 0;
      if (r >= 1 && r <= 6 && c >= 1 && c <= 6) {
        value = template[i] * intensity + rng.uniform(-0.15, 0.15);
      }
      out[offset + i] = Math.min(1, Math.max(0, value));
    }
  }
}

function renderSplit(spec: DatasetSpec, split: 'train' | 'test',
                     perClass: number, rng: Rng): DatasetDef {
  const n = perClass * CLASS_COUNT;
  const pixels = IMAGE_SIZE * IMAGE_SIZE;
  const images = new Float32Array(n * pixels);
  const labels = new Int32Array(n);
  let index = 0;
  for (let i = 0; i < perClass; i++) {
    for (let cls = 0; cls < CLASS_COUNT; cls++) {
      labels[index] = cls;
      renderExample(cls, spec.variant, rng, images, index * pixels);
      index++;
    }
  }
  return {
    name: spec.name,
    split,
    classCount: CLASS_COUNT,
    shape: [IMAGE_SIZE, IMAGE_SIZE, 1],
    images,
    labels,
  };
}

export function makeDataset(spec: DatasetSpec): { train: DatasetDef; test: DatasetDef } {
  const rng = new Rng(spec.seed);
  return {
    train: renderSplit(spec, 'train', spec.perClassTrain, rng),
    test: renderSplit(spec, 'test', spec.perClassTest, rng),
  };
}
