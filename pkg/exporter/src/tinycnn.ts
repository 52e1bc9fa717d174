/**
 * A small convolutional backbone with pinned, procedurally generated
 * weights. It exists so the exporter runs hermetically: same binary, same
 * weights version, bit-identical descriptors on every machine. Real
 * pretrained backbones plug in through the same interface.
 *
 * Architecture: conv3x3/s2 (8ch, ReLU) -> conv3x3/s2 (16ch, ReLU) ->
 * 8x8 average pool, giving an 8x8x16 feature map for a 256x256 patch.
 */

import type { RgbImage } from './png'

export const TINY_CNN_WEIGHTS_VERSION = 'w1'

/** xorshift128 PRNG: deterministic 32-bit integer arithmetic only. */
export function makePrng(seed: number): () => number {
  let x = seed >>> 0 || 0x9e3779b9
  let y = 0x243f6a88
  let z = 0xb7e15162
  let w = 0xdeadbeef
  return () => {
    const t = x ^ ((x << 11) >>> 0)
    x = y
    y = z
    z = w
    w = (w ^ (w >>> 19) ^ (t ^ (t >>> 8))) >>> 0
    return w / 0x100000000 // [0, 1)
  }
}

interface ConvLayer {
  inChannels: number
  outChannels: number
  /** [kh][kw][in][out], flattened; 3x3 kernels */
  weights: Float32Array
  bias: Float32Array
}

function makeConv(prng: () => number, inChannels: number, outChannels: number): ConvLayer {
  const fanIn = 9 * inChannels
  const scale = Math.sqrt(2.0 / fanIn)
  const weights = new Float32Array(9 * inChannels * outChannels)
  for (let i = 0; i < weights.length; i++) {
    weights[i] = Math.fround((prng() * 2 - 1) * scale)
  }
  const bias = new Float32Array(outChannels)
  for (let i = 0; i < outChannels; i++) {
    bias[i] = Math.fround((prng() * 2 - 1) * 0.05)
  }
  return { inChannels, outChannels, weights, bias }
}

/** 3x3 convolution, stride 2, pad 1, ReLU. Input/output are HWC. */
function convS2Relu(
  input: Float32Array,
  width: number,
  height: number,
  layer: ConvLayer,
): { data: Float32Array; width: number; height: number } {
  const outW = Math.floor(width / 2)
  const outH = Math.floor(height / 2)
  const { inChannels: ic, outChannels: oc, weights, bias } = layer
  const out = new Float32Array(outW * outH * oc)
  for (let oy = 0; oy < outH; oy++) {
    for (let ox = 0; ox < outW; ox++) {
      const cy = oy * 2
      const cx = ox * 2
      const outBase = (oy * outW + ox) * oc
      for (let co = 0; co < oc; co++) {
        let acc = bias[co]
        for (let ky = -1; ky <= 1; ky++) {
          const iy = cy + ky
          if (iy < 0 || iy >= height) continue
          for (let kx = -1; kx <= 1; kx++) {
            const ix = cx + kx
            if (ix < 0 || ix >= width) continue
            const inBase = (iy * width + ix) * ic
            const wBase = (((ky + 1) * 3 + (kx + 1)) * ic) * oc
            for (let ci = 0; ci < ic; ci++) {
              acc += input[inBase + ci] * weights[wBase + ci * oc + co]
            }
          }
        }
        out[outBase + co] = acc > 0 ? Math.fround(acc) : 0
      }
    }
  }
  return { data: out, width: outW, height: outH }
}

export type ExportMode = 'grid' | 'pooled'
export type Preprocess = 'normalized' | 'raw'

// ImageNet channel statistics, the standard published recipe
const MEAN = [0.485, 0.456, 0.406]
const STD = [0.229, 0.224, 0.225]

export class TinyCnnBackbone {
  readonly id = `tiny-cnn-${TINY_CNN_WEIGHTS_VERSION}`
  readonly descriptorDim = 16
  readonly poolSize = 8
  private conv1: ConvLayer
  private conv2: ConvLayer

  constructor(readonly preprocess: Preprocess = 'normalized') {
    const prng = makePrng(0x7a7c4b1d)
    this.conv1 = makeConv(prng, 3, 8)
    this.conv2 = makeConv(prng, 8, 16)
  }

  gridShape(width: number, height: number): [number, number] {
    return [Math.floor(height / 4 / this.poolSize), Math.floor(width / 4 / this.poolSize)]
  }

  /** Feature map cells in row-major order: R x d values for one patch. */
  extract(image: RgbImage, mode: ExportMode): Float32Array {
    const { width, height, pixels } = image
    if (width % 32 !== 0 || height % 32 !== 0) {
      throw new Error(`patch dimensions ${width}x${height} must be multiples of 32`)
    }
    const input = new Float32Array(width * height * 3)
    for (let i = 0, j = 0; i < input.length; i += 3, j += 3) {
      for (let c = 0; c < 3; c++) {
        const v = pixels[j + c] / 255
        input[i + c] =
          this.preprocess === 'normalized' ? Math.fround((v - MEAN[c]) / STD[c]) : Math.fround(v)
      }
    }
    const a = convS2Relu(input, width, height, this.conv1)
    const b = convS2Relu(a.data, a.width, a.height, this.conv2)

    const [rows, cols] = this.gridShape(width, height)
    const d = this.descriptorDim
    const cells = new Float32Array(rows * cols * d)
    const cell = this.poolSize
    const norm = 1 / (cell * cell)
    for (let gy = 0; gy < rows; gy++) {
      for (let gx = 0; gx < cols; gx++) {
        const base = (gy * cols + gx) * d
        for (let y = gy * cell; y < (gy + 1) * cell; y++) {
          for (let x = gx * cell; x < (gx + 1) * cell; x++) {
            const src = (y * b.width + x) * d
            for (let c = 0; c < d; c++) {
              cells[base + c] += b.data[src + c]
            }
          }
        }
        for (let c = 0; c < d; c++) {
          cells[base + c] = Math.fround(cells[base + c] * norm)
        }
      }
    }
    if (mode === 'grid') {
      return cells
    }
    const pooled = new Float32Array(d)
    const nCells = rows * cols
    for (let i = 0; i < cells.length; i += d) {
      for (let c = 0; c < d; c++) {
        pooled[c] += cells[i + c]
      }
    }
    for (let c = 0; c < d; c++) {
      pooled[c] = Math.fround(pooled[c] / nCells)
    }
    return pooled
  }
}
