import fs from 'fs'
import type { RgbImage } from './png'
import { ExportMode, Preprocess, TinyCnnBackbone } from './tinycnn'

export interface Backbone {
  /** identifies backbone + pinned weights, recorded in extractor_id */
  id: string
  descriptorDim: number
  gridShape(width: number, height: number): [number, number]
  extract(image: RgbImage, mode: ExportMode): Float32Array
}

export class NetworkError extends Error {}

export interface BackboneOptions {
  /** local pretrained weights (tfjs graph-model directory) */
  weightsPath?: string
  preprocess?: Preprocess
}

/**
 * The default backbone family is googlenet (Inception-v1, ImageNet
 * weights). Pretrained weights are not bundled: without a local copy the
 * exporter would have to download them, which fails loudly offline. The
 * tiny-cnn backbone has pinned procedural weights and needs nothing.
 */
export function createBackbone(name: string, options: BackboneOptions = {}): Backbone {
  switch (name) {
    case 'tiny-cnn':
      return new TinyCnnBackbone(options.preprocess ?? 'normalized')
    case 'googlenet': {
      if (!options.weightsPath) {
        throw new NetworkError(
          'googlenet weights are not bundled and downloading them requires ' +
            'network access; pass --weights <dir> with a local tfjs graph model, ' +
            'or use --backbone tiny-cnn',
        )
      }
      if (!fs.existsSync(options.weightsPath)) {
        throw new NetworkError(
          `weights path ${options.weightsPath} does not exist; download the ` +
            'model on a machine with network access and copy it here',
        )
      }
      throw new Error(
        'running tfjs graph models is not wired into this build; install ' +
          '@tensorflow/tfjs and extend createBackbone, or use --backbone tiny-cnn',
      )
    }
    default:
      throw new Error(`unknown backbone ${name}; available: googlenet, tiny-cnn`)
  }
}
