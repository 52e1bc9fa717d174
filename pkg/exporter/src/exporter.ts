/**
 * Walk a patch store (PNGs + sets.csv), push every set's patches through
 * the backbone one set at a time in seq_index order, and write one .pbfv
 * descriptor file per set. Pooled mode emits R=1 embeddings; grid mode one
 * descriptor per feature-map cell.
 */

import fs from 'fs'
import path from 'path'
import { Backbone, BackboneOptions, createBackbone } from './backbone'
import { patchPath, readManifest, SetRecord } from './manifest'
import { labelCode, writeFeatureFile } from './pbfv'
import { readRgbPng } from './png'
import type { ExportMode, Preprocess } from './tinycnn'

export interface ExporterConfig {
  /** directory holding patch PNGs and sets.csv */
  patchDir: string
  outDir: string
  backbone?: string
  mode?: ExportMode
  batchSize?: number
  weightsPath?: string
  preprocess?: Preprocess
  /** advisory; this build runs on cpu */
  device?: string
  log?: (message: string) => void
}

export interface SetError {
  regionId: string
  error: string
}

export interface ExportResult {
  written: string[]
  errors: SetError[]
  extractorId: string
}

export function extractorIdFor(backbone: Backbone, mode: ExportMode, width = 256, height = 256): string {
  if (mode === 'pooled') {
    return `${backbone.id}/pooled/${backbone.descriptorDim}`
  }
  const [rows, cols] = backbone.gridShape(width, height)
  return `${backbone.id}/grid/${rows}x${cols}x${backbone.descriptorDim}`
}

function exportOneSet(
  backbone: Backbone,
  mode: ExportMode,
  batchSize: number,
  patchDir: string,
  record: SetRecord,
): { values: Float32Array; r: number } {
  const d = backbone.descriptorDim
  let r = mode === 'pooled' ? 1 : -1 // resolved from the first patch
  let values: Float32Array | null = null
  for (let start = 0; start < record.nPatches; start += batchSize) {
    const end = Math.min(start + batchSize, record.nPatches)
    for (let i = start; i < end; i++) {
      const image = readRgbPng(patchPath(patchDir, record.regionId, i))
      const cells = backbone.extract(image, mode)
      if (r === -1) {
        r = cells.length / d
      }
      if (values === null) {
        values = new Float32Array(record.nPatches * r * d)
      }
      if (cells.length !== r * d) {
        throw new Error(
          `${record.regionId} patch ${i}: descriptor count ${cells.length / d} != R=${r}`,
        )
      }
      values.set(cells, i * r * d)
    }
  }
  if (values === null) {
    values = new Float32Array(0)
    r = mode === 'pooled' ? 1 : backbone.gridShape(256, 256)[0] * backbone.gridShape(256, 256)[1]
  }
  return { values, r }
}

export function exportFeatures(config: ExporterConfig): ExportResult {
  const mode = config.mode ?? 'grid'
  const batchSize = config.batchSize ?? 16
  const log = config.log ?? (() => undefined)
  const options: BackboneOptions = {
    weightsPath: config.weightsPath,
    preprocess: config.preprocess,
  }
  const backbone = createBackbone(config.backbone ?? 'googlenet', options)

  fs.mkdirSync(config.outDir, { recursive: true })
  const records = readManifest(config.patchDir)
  const written: string[] = []
  const errors: SetError[] = []
  let extractorId = extractorIdFor(backbone, mode)

  for (const record of records) {
    try {
      const { values, r } = exportOneSet(backbone, mode, batchSize, config.patchDir, record)
      extractorId = extractorIdFor(backbone, mode)
      const outPath = path.join(config.outDir, `${record.regionId}.pbfv`)
      writeFeatureFile(
        {
          regionId: record.regionId,
          label: labelCode(record.label),
          scale: record.scale,
          extractorId,
          nPatches: record.nPatches,
          r,
          d: backbone.descriptorDim,
          values,
        },
        outPath,
      )
      written.push(outPath)
      log(`${record.regionId}: ${record.nPatches} patches -> ${path.basename(outPath)}`)
    } catch (err) {
      // an unreadable patch skips the whole set, not the whole export
      errors.push({ regionId: record.regionId, error: (err as Error).message })
      log(`${record.regionId}: SKIPPED (${(err as Error).message})`)
    }
  }

  if (errors.length > 0) {
    const lines = ['region_id,error']
    for (const e of errors) {
      lines.push(`${e.regionId},"${e.error.replace(/"/g, "'")}"`)
    }
    fs.writeFileSync(path.join(config.outDir, 'export_errors.csv'), lines.join('\n') + '\n')
  }
  return { written, errors, extractorId }
}
