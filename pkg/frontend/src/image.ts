/**
 * Image decoding and the standard pretrained-backbone preprocessing:
 * resize the shorter side, center-crop to the square target, scale to
 * [0,1], then per-channel ImageNet mean/std normalization. The recipe is
 * recorded verbatim in the output manifest for provenance.
 */

import * as fs from 'node:fs'
import * as path from 'node:path'
import * as tf from '@tensorflow/tfjs'
import jpeg from 'jpeg-js'
import { PNG } from 'pngjs'

export const IMAGENET_MEAN = [0.485, 0.456, 0.406] as const
export const IMAGENET_STD = [0.229, 0.224, 0.225] as const

export interface DecodedImage {
  width: number
  height: number
  /** RGBA, 8-bit, row-major */
  data: Uint8Array
}

export function decodeImage(filePath: string): DecodedImage {
  const raw = fs.readFileSync(filePath)
  const ext = path.extname(filePath).toLowerCase()
  if (ext === '.png') {
    const png = PNG.sync.read(raw)
    return { width: png.width, height: png.height, data: new Uint8Array(png.data) }
  }
  if (ext === '.jpg' || ext === '.jpeg') {
    const img = jpeg.decode(raw, { useTArray: true, formatAsRGBA: true })
    return { width: img.width, height: img.height, data: new Uint8Array(img.data) }
  }
  throw new Error(`${filePath}: unsupported image type ${ext || '(none)'}`)
}

/** Names the exact preprocessing applied, for the manifest. */
export function preprocessRecipe(target: number): string {
  const shorter = Math.round((target * 256) / 224)
  return (
    `resize shorter side to ${shorter} (bilinear), center-crop ${target}x${target}, ` +
    `scale 1/255, normalize mean=[${IMAGENET_MEAN.join(',')}] std=[${IMAGENET_STD.join(',')}]`
  )
}

/**
 * Decoded image -> normalized NHWC float tensor of shape
 * [1, target, target, 3].
 */
export function preprocess(img: DecodedImage, target: number): tf.Tensor4D {
  return tf.tidy(() => {
    const rgba = tf.tensor3d(img.data, [img.height, img.width, 4], 'int32')
    const rgb = rgba.slice([0, 0, 0], [img.height, img.width, 3]).toFloat()

    const shorter = Math.round((target * 256) / 224)
    const scale = shorter / Math.min(img.width, img.height)
    const rw = Math.max(target, Math.round(img.width * scale))
    const rh = Math.max(target, Math.round(img.height * scale))
    const resized = tf.image.resizeBilinear(rgb as tf.Tensor3D, [rh, rw])

    const top = Math.floor((rh - target) / 2)
    const left = Math.floor((rw - target) / 2)
    const cropped = resized.slice([top, left, 0], [target, target, 3])

    const unit = cropped.div(255.0)
    const mean = tf.tensor1d([...IMAGENET_MEAN])
    const std = tf.tensor1d([...IMAGENET_STD])
    return unit.sub(mean).div(std).expandDims(0) as tf.Tensor4D
  })
}
