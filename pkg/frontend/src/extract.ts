/**
 * Batch feature extraction: images in, one .sgeo embedding file (plus
 * manifest) out, row order equal to input order.
 */

import * as tf from '@tensorflow/tfjs'

import { Backbone, ExtractSpec, WeightsFile } from './backbones.js'
import { decodeImage, preprocess, preprocessRecipe } from './image.js'
import { writeEmbeddings } from './sgeo.js'

export interface ExtractOptions {
  /** 'abort' fails on the first unreadable image; 'skip' records it */
  onUnreadable?: 'abort' | 'skip'
  batchSize?: number
  weights?: WeightsFile
}

export interface ExtractResult {
  rows: Float32Array
  nRows: number
  dim: number
  ids: string[]
  skipped: string[]
}

export async function extract(
  imagePaths: string[],
  spec: ExtractSpec,
  opts: ExtractOptions = {},
): Promise<ExtractResult> {
  const onUnreadable = opts.onUnreadable ?? 'abort'
  const batchSize = opts.batchSize ?? 4
  if (new Set(imagePaths).size !== imagePaths.length) {
    throw new Error('image list contains duplicate paths (row ids must be unique)')
  }

  await tf.ready()
  const backbone = new Backbone(spec, opts.weights)
  const ids: string[] = []
  const skipped: string[] = []
  const feature_rows: Float32Array[] = []
  try {
    for (let at = 0; at < imagePaths.length; at += batchSize) {
      const slice = imagePaths.slice(at, at + batchSize)
      const tensors: tf.Tensor4D[] = []
      for (const p of slice) {
        try {
          tensors.push(preprocess(decodeImage(p), spec.resize))
        } catch (err) {
          if (onUnreadable === 'abort') {
            tensors.forEach((t) => t.dispose())
            throw new Error(`unreadable image ${p}: ${(err as Error).message}`)
          }
          skipped.push(p)
          continue
        }
        ids.push(p)
      }
      if (tensors.length === 0) continue
      const batch = tf.concat(tensors, 0) as tf.Tensor4D
      tensors.forEach((t) => t.dispose())
      const features = backbone.forward(batch)
      batch.dispose()
      const data = (await features.data()) as Float32Array
      const [n, dim] = features.shape
      features.dispose()
      for (let i = 0; i < n; i++) {
        feature_rows.push(data.slice(i * dim, (i + 1) * dim))
      }
    }
  } finally {
    backbone.dispose()
  }

  const dim = spec.dim
  const rows = new Float32Array(feature_rows.length * dim)
  feature_rows.forEach((row, i) => rows.set(row, i * dim))
  return { rows, nRows: feature_rows.length, dim, ids, skipped }
}

export async function extractToFile(
  imagePaths: string[],
  spec: ExtractSpec,
  outPath: string,
  opts: ExtractOptions = {},
): Promise<ExtractResult> {
  const result = await extract(imagePaths, spec, opts)
  writeEmbeddings(outPath, result.rows, result.nRows, result.dim, {
    ids: result.ids,
    backbone: spec.backbone,
    dim: spec.dim,
    preprocessing: preprocessRecipe(spec.resize),
    seed: spec.seed,
    skipped: result.skipped,
  })
  return result
}
