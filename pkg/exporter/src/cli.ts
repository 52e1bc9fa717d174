#!/usr/bin/env node
/**
 * patchbag-export --patches <dir> --out <dir> [--backbone googlenet|tiny-cnn]
 *                 [--mode grid|pooled] [--batch N] [--weights <dir>]
 *                 [--preprocess normalized|raw] [--device cpu]
 */

import { NetworkError } from './backbone'
import { exportFeatures, ExporterConfig } from './exporter'

function parseArgs(argv: string[]): ExporterConfig {
  const config: Partial<ExporterConfig> = {}
  for (let i = 0; i < argv.length; i++) {
    const next = () => {
      if (i + 1 >= argv.length) throw new Error(`${argv[i]} needs a value`)
      return argv[++i]
    }
    switch (argv[i]) {
      case '--patches':
        config.patchDir = next()
        break
      case '--out':
        config.outDir = next()
        break
      case '--backbone':
        config.backbone = next()
        break
      case '--mode': {
        const mode = next()
        if (mode !== 'grid' && mode !== 'pooled') throw new Error(`bad --mode ${mode}`)
        config.mode = mode
        break
      }
      case '--batch':
        config.batchSize = parseInt(next(), 10)
        break
      case '--weights':
        config.weightsPath = next()
        break
      case '--preprocess': {
        const p = next()
        if (p !== 'normalized' && p !== 'raw') throw new Error(`bad --preprocess ${p}`)
        config.preprocess = p
        break
      }
      case '--device':
        config.device = next()
        break
      case '--help':
        console.log(
          'patchbag-export --patches <dir> --out <dir> [--backbone googlenet|tiny-cnn] ' +
            '[--mode grid|pooled] [--batch N] [--weights <dir>] ' +
            '[--preprocess normalized|raw] [--device cpu]',
        )
        process.exit(0)
        break
      default:
        throw new Error(`unknown argument ${argv[i]}`)
    }
  }
  if (!config.patchDir || !config.outDir) {
    throw new Error('both --patches and --out are required')
  }
  return config as ExporterConfig
}

function main(): number {
  let config: ExporterConfig
  try {
    config = parseArgs(process.argv.slice(2))
  } catch (err) {
    console.error(`usage error: ${(err as Error).message}`)
    return 2
  }
  config.log = (m) => console.error(m)
  try {
    const result = exportFeatures(config)
    console.error(
      `wrote ${result.written.length} feature files (${result.extractorId}), ` +
        `${result.errors.length} sets skipped`,
    )
    return result.errors.length > 0 ? 1 : 0
  } catch (err) {
    if (err instanceof NetworkError) {
      console.error(`network error: ${err.message}`)
      return 3
    }
    console.error(`error: ${(err as Error).message}`)
    return 1
  }
}

process.exit(main())
