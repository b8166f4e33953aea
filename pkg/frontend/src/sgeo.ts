/**
 * Writer (and test-side reader) for the .sgeo embedding format consumed
 * by the retrieval pipeline.
 *
 * Layout: magic "SGEO", u32 version=1, u32 nRows, u32 dim, u8 dtype
 * (0 = f32), then nRows*dim little-endian float32 values. A companion
 * JSON manifest at `<path>.json` lists the row ids in order (plus any
 * provenance fields the producer wants to record).
 */

import * as fs from 'node:fs'

export const SGEO_MAGIC = 'SGEO'
export const SGEO_VERSION = 1
const HEADER_BYTES = 17

export interface EmbeddingManifest {
  ids: string[]
  [extra: string]: unknown
}

export function writeEmbeddings(
  path: string,
  rows: Float32Array,
  nRows: number,
  dim: number,
  manifest: EmbeddingManifest,
): void {
  if (rows.length !== nRows * dim) {
    throw new Error(`payload has ${rows.length} values, expected ${nRows * dim}`)
  }
  if (manifest.ids.length !== nRows) {
    throw new Error(`${manifest.ids.length} ids for ${nRows} rows`)
  }
  if (new Set(manifest.ids).size !== manifest.ids.length) {
    throw new Error('manifest ids must be unique')
  }
  const buf = Buffer.alloc(HEADER_BYTES + nRows * dim * 4)
  buf.write(SGEO_MAGIC, 0, 'ascii')
  buf.writeUInt32LE(SGEO_VERSION, 4)
  buf.writeUInt32LE(nRows, 8)
  buf.writeUInt32LE(dim, 12)
  buf.writeUInt8(0, 16)
  for (let i = 0; i < rows.length; i++) {
    buf.writeFloatLE(rows[i], HEADER_BYTES + i * 4)
  }
  fs.writeFileSync(path, buf)
  fs.writeFileSync(`${path}.json`, JSON.stringify(manifest))
}

export function readEmbeddings(path: string): {
  rows: Float32Array
  nRows: number
  dim: number
  manifest: EmbeddingManifest
} {
  const buf = fs.readFileSync(path)
  if (buf.length < HEADER_BYTES) throw new Error(`${path}: truncated header`)
  if (buf.toString('ascii', 0, 4) !== SGEO_MAGIC) {
    throw new Error(`${path}: bad magic`)
  }
  const version = buf.readUInt32LE(4)
  if (version !== SGEO_VERSION) throw new Error(`${path}: unsupported version ${version}`)
  const nRows = buf.readUInt32LE(8)
  const dim = buf.readUInt32LE(12)
  if (buf.readUInt8(16) !== 0) throw new Error(`${path}: unknown dtype code`)
  const expected = HEADER_BYTES + nRows * dim * 4
  if (buf.length !== expected) {
    throw new Error(`${path}: payload length mismatch (${buf.length} bytes, expected ${expected})`)
  }
  const rows = new Float32Array(nRows * dim)
  for (let i = 0; i < rows.length; i++) {
    rows[i] = buf.readFloatLE(HEADER_BYTES + i * 4)
  }
  const manifest = JSON.parse(
    fs.readFileSync(`${path}.json`, 'utf-8'),
  ) as EmbeddingManifest
  if (!Array.isArray(manifest.ids) || manifest.ids.length !== nRows) {
    throw new Error(`${path}.json: manifest does not cover all ${nRows} rows`)
  }
  return { rows, nRows, dim, manifest }
}
