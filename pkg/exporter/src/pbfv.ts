/**
 * The .pbfv descriptor file: the byte-level contract shared with the
 * patch-classification pipeline that consumes these files.
 *
 * Little-endian layout:
 *   "PBFV" | version u16 = 1 | extractor_id (u16 len + UTF-8)
 *   | label u8 | scale u8 | region_id (u16 len + UTF-8)
 *   | n_patches u32 | R u32 | d u32
 *   | n_patches * R * d float32, patch-major, descriptor-major
 *   | CRC32 of all preceding bytes
 */

import fs from 'fs'
import path from 'path'
import { crc32 } from './crc32'

export const MAGIC = 'PBFV'
export const VERSION = 1

export const LABEL_CODES: Record<string, number> = {
  normal: 0,
  benign: 1,
  insitu: 2,
  invasive: 3,
}

export interface FeatureSet {
  regionId: string
  /** class code 0..3 (0=Normal, 1=Benign, 2=InSitu, 3=Invasive) */
  label: number
  scale: number
  extractorId: string
  nPatches: number
  r: number
  d: number
  /** nPatches * r * d values, patch-major */
  values: Float32Array
}

export function labelCode(label: string): number {
  const code = LABEL_CODES[label.toLowerCase().replace(/[\s_-]/g, '')]
  if (code === undefined) {
    throw new Error(`unknown class label: ${label}`)
  }
  return code
}

export function encodeFeatureSet(set: FeatureSet): Buffer {
  if (set.values.length !== set.nPatches * set.r * set.d) {
    throw new Error(
      `value count ${set.values.length} != n*R*d = ${set.nPatches * set.r * set.d}`,
    )
  }
  for (const v of set.values) {
    if (!Number.isFinite(v)) {
      throw new Error(`${set.regionId}: descriptors contain non-finite values`)
    }
  }
  const extractorId = Buffer.from(set.extractorId, 'utf-8')
  const regionId = Buffer.from(set.regionId, 'utf-8')
  const headerSize = 4 + 2 + 2 + extractorId.length + 1 + 1 + 2 + regionId.length + 12
  const body = Buffer.alloc(headerSize + set.values.length * 4 + 4)

  let off = 0
  off += body.write(MAGIC, off, 'ascii')
  off = body.writeUInt16LE(VERSION, off)
  off = body.writeUInt16LE(extractorId.length, off)
  off += extractorId.copy(body, off)
  off = body.writeUInt8(set.label, off)
  off = body.writeUInt8(set.scale, off)
  off = body.writeUInt16LE(regionId.length, off)
  off += regionId.copy(body, off)
  off = body.writeUInt32LE(set.nPatches, off)
  off = body.writeUInt32LE(set.r, off)
  off = body.writeUInt32LE(set.d, off)
  for (const v of set.values) {
    off = body.writeFloatLE(Math.fround(v), off)
  }
  body.writeUInt32LE(crc32(body.subarray(0, off)), off)
  return body
}

export function writeFeatureFile(set: FeatureSet, filePath: string): void {
  const tmp = path.join(
    path.dirname(filePath),
    `.${path.basename(filePath)}.${process.pid}.tmp`,
  )
  fs.writeFileSync(tmp, encodeFeatureSet(set))
  fs.renameSync(tmp, filePath)
}

/** Parse + validate a .pbfv buffer (used to self-check exports in tests). */
export function decodeFeatureSet(data: Buffer): FeatureSet {
  if (data.length < 8) throw new Error('truncated: shorter than framing')
  if (data.toString('ascii', 0, 4) !== MAGIC) throw new Error('bad magic')
  const stored = data.readUInt32LE(data.length - 4)
  const actual = crc32(data.subarray(0, data.length - 4))
  if (stored !== actual) throw new Error('bad CRC32')

  let off = 4
  const version = data.readUInt16LE(off)
  off += 2
  if (version !== VERSION) throw new Error(`unsupported version ${version}`)
  const eidLen = data.readUInt16LE(off)
  off += 2
  const extractorId = data.toString('utf-8', off, off + eidLen)
  off += eidLen
  const label = data.readUInt8(off++)
  const scale = data.readUInt8(off++)
  const ridLen = data.readUInt16LE(off)
  off += 2
  const regionId = data.toString('utf-8', off, off + ridLen)
  off += ridLen
  const nPatches = data.readUInt32LE(off)
  off += 4
  const r = data.readUInt32LE(off)
  off += 4
  const d = data.readUInt32LE(off)
  off += 4
  const count = nPatches * r * d
  if (off + count * 4 + 4 !== data.length) {
    throw new Error(`payload size mismatch: expected ${count} float32 values`)
  }
  const values = new Float32Array(count)
  for (let i = 0; i < count; i++) {
    values[i] = data.readFloatLE(off + i * 4)
  }
  return { regionId, label, scale, extractorId, nPatches, r, d, values }
}
