/** The tiler's patch store: sets.csv plus one PNG per patch. */

import fs from 'fs'
import path from 'path'

export interface SetRecord {
  regionId: string
  label: string
  scale: number
  nPatches: number
  order: string
}

export const MANIFEST_NAME = 'sets.csv'

export function readManifest(patchDir: string): SetRecord[] {
  const manifestPath = path.join(patchDir, MANIFEST_NAME)
  if (!fs.existsSync(manifestPath)) {
    throw new Error(`no ${MANIFEST_NAME} in ${patchDir}; run the tiler first`)
  }
  const lines = fs.readFileSync(manifestPath, 'utf-8').trim().split(/\r?\n/)
  const header = lines[0].split(',')
  const expected = ['region_id', 'label', 'scale', 'n_patches', 'order']
  if (header.join(',') !== expected.join(',')) {
    throw new Error(`unexpected manifest header: ${lines[0]}`)
  }
  return lines.slice(1).filter((l) => l.length > 0).map((line) => {
    const [regionId, label, scale, nPatches, order] = line.split(',')
    return {
      regionId,
      label,
      scale: parseInt(scale, 10),
      nPatches: parseInt(nPatches, 10),
      order,
    }
  })
}

export function patchFilename(regionId: string, seqIndex: number): string {
  return `${regionId}_${String(seqIndex).padStart(5, '0')}.png`
}

export function patchPath(patchDir: string, regionId: string, seqIndex: number): string {
  return path.join(patchDir, patchFilename(regionId, seqIndex))
}
