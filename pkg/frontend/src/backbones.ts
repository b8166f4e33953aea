/**
 * Feature-extraction backbones built functionally on tfjs ops.
 *
 * vgg16 keeps the convolutional stack plus the first fully connected
 * stage (the last two classifier layers are dropped), giving 4096-wide
 * features; the resnets drop their final classifier entirely and emit
 * the globally pooled trunk output (512 for resnet18/34, 2048 for
 * resnet50). An adaptive average pool in front of the vgg16 classifier
 * makes every backbone accept any square input size.
 *
 * Weights come from a local weights file when one is supplied; without
 * one, each tensor is generated deterministically from (seed, tensor
 * name), so runs are reproducible and partial overrides do not disturb
 * unrelated tensors. Inference is eval-mode only: batch norm uses stored
 * statistics and there is no dropout, so repeated runs are bit-identical.
 */

import * as fs from 'node:fs'
import * as tf from '@tensorflow/tfjs'

import { gaussian, mulberry32, normalFloat32 } from './prng.js'

export type BackboneName = 'vgg16' | 'resnet18' | 'resnet34' | 'resnet50'

export const OUTPUT_DIMS: Record<BackboneName, number> = {
  vgg16: 4096,
  resnet18: 512,
  resnet34: 512,
  resnet50: 2048,
}

export interface ExtractSpec {
  backbone: BackboneName
  /** output feature width; must equal the backbone's true width */
  dim: number
  /** square input size fed to the network (224 = standard recipe) */
  resize: number
  /** weight-generation seed used when no weights file is given */
  seed: number
}

export function makeExtractSpec(opts: {
  backbone: BackboneName
  dim?: number
  resize?: number
  seed?: number
}): ExtractSpec {
  const trueDim = OUTPUT_DIMS[opts.backbone]
  if (trueDim === undefined) {
    throw new Error(`unknown backbone ${String(opts.backbone)}`)
  }
  const dim = opts.dim ?? trueDim
  if (dim !== trueDim) {
    throw new Error(
      `declared dim ${dim} does not match ${opts.backbone} output width ${trueDim}`,
    )
  }
  const resize = opts.resize ?? 224
  if (resize < 32) throw new Error(`resize ${resize} too small (min 32)`)
  return { backbone: opts.backbone, dim, resize, seed: opts.seed ?? 0 }
}

// --------------------------------------------------------------------------
// weights
// --------------------------------------------------------------------------

const WEIGHTS_MAGIC = 'SGWT'

export interface WeightsFile {
  tensors: Map<string, { shape: number[]; data: Float32Array }>
}

/**
 * Binary weights container: magic "SGWT", u32 header length, JSON header
 * {entries: [{name, shape}]}, then the concatenated little-endian f32
 * payloads in entry order. Partial files are allowed; missing tensors
 * fall back to seeded initialization.
 */
export function readWeightsFile(path: string): WeightsFile {
  const buf = fs.readFileSync(path)
  if (buf.toString('ascii', 0, 4) !== WEIGHTS_MAGIC) {
    throw new Error(`${path}: bad weights magic`)
  }
  const hlen = buf.readUInt32LE(4)
  const header = JSON.parse(buf.toString('utf-8', 8, 8 + hlen)) as {
    entries: { name: string; shape: number[] }[]
  }
  const tensors = new Map<string, { shape: number[]; data: Float32Array }>()
  let at = 8 + hlen
  for (const entry of header.entries) {
    const n = entry.shape.reduce((a, b) => a * b, 1)
    const data = new Float32Array(n)
    for (let i = 0; i < n; i++) data[i] = buf.readFloatLE(at + i * 4)
    at += n * 4
    tensors.set(entry.name, { shape: entry.shape, data })
  }
  if (at !== buf.length) throw new Error(`${path}: trailing bytes in weights file`)
  return { tensors }
}

export function writeWeightsFile(
  path: string,
  tensors: { name: string; shape: number[]; data: Float32Array }[],
): void {
  const header = Buffer.from(
    JSON.stringify({ entries: tensors.map((t) => ({ name: t.name, shape: t.shape })) }),
    'utf-8',
  )
  const payload = tensors.reduce((a, t) => a + t.data.length * 4, 0)
  const buf = Buffer.alloc(8 + header.length + payload)
  buf.write(WEIGHTS_MAGIC, 0, 'ascii')
  buf.writeUInt32LE(header.length, 4)
  header.copy(buf, 8)
  let at = 8 + header.length
  for (const t of tensors) {
    for (let i = 0; i < t.data.length; i++) buf.writeFloatLE(t.data[i], at + i * 4)
    at += t.data.length * 4
  }
  fs.writeFileSync(path, buf)
}

function fnv1a(text: string): number {
  let h = 0x811c9dc5
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i)
    h = Math.imul(h, 0x01000193)
  }
  return h >>> 0
}

class WeightStore {
  private cache = new Map<string, tf.Tensor>()

  constructor(
    private seed: number,
    private overrides?: WeightsFile,
  ) {}

  /** He-style random tensor keyed by name, or the override if present. */
  get(name: string, shape: number[], fanIn: number): tf.Tensor {
    const hit = this.cache.get(name)
    if (hit !== undefined) return hit
    let tensor: tf.Tensor
    const override = this.overrides?.tensors.get(name)
    if (override !== undefined) {
      const want = shape.join('x')
      const got = override.shape.join('x')
      if (want !== got) {
        throw new Error(`weights file tensor ${name} has shape ${got}, expected ${want}`)
      }
      tensor = tf.tensor(override.data, shape)
    } else {
      const next = gaussian(mulberry32((fnv1a(name) ^ this.seed) >>> 0))
      const n = shape.reduce((a, b) => a * b, 1)
      tensor = tf.tensor(normalFloat32(next, n, Math.sqrt(2 / fanIn)), shape)
    }
    this.cache.set(name, tensor)
    return tensor
  }

  /** Constant tensor (batch-norm statistics and affine defaults). */
  constant(name: string, shape: number[], value: number): tf.Tensor {
    const hit = this.cache.get(name)
    if (hit !== undefined) return hit
    const override = this.overrides?.tensors.get(name)
    const tensor =
      override !== undefined
        ? tf.tensor(override.data, shape)
        : tf.fill(shape, value)
    this.cache.set(name, tensor)
    return tensor
  }

  dispose(): void {
    for (const t of this.cache.values()) t.dispose()
    this.cache.clear()
  }
}

// --------------------------------------------------------------------------
// building blocks
// --------------------------------------------------------------------------

const BN_EPS = 1e-5

function conv(
  store: WeightStore,
  name: string,
  x: tf.Tensor4D,
  cin: number,
  cout: number,
  k: number,
  stride: number,
  bias: boolean,
): tf.Tensor4D {
  const kernel = store.get(`${name}/kernel`, [k, k, cin, cout], k * k * cin)
  let y = tf.conv2d(x, kernel as tf.Tensor4D, stride, 'same')
  if (bias) {
    const b = store.constant(`${name}/bias`, [cout], 0)
    y = tf.add(y, b) as tf.Tensor4D
  }
  return y
}

function batchNorm(
  store: WeightStore,
  name: string,
  x: tf.Tensor4D,
  c: number,
): tf.Tensor4D {
  const mean = store.constant(`${name}/mean`, [c], 0)
  const variance = store.constant(`${name}/variance`, [c], 1)
  const gamma = store.constant(`${name}/gamma`, [c], 1)
  const beta = store.constant(`${name}/beta`, [c], 0)
  return tf.batchNorm(x, mean, variance, beta, gamma, BN_EPS) as tf.Tensor4D
}

/** Average pool to a fixed out x out grid regardless of input size. */
export function adaptiveAvgPool(x: tf.Tensor4D, out: number): tf.Tensor4D {
  const [, h, w] = x.shape
  if (h === out && w === out) return x
  return tf.tidy(() => {
    const rows: tf.Tensor4D[] = []
    for (let i = 0; i < out; i++) {
      const r0 = Math.floor((i * h) / out)
      const r1 = Math.max(r0 + 1, Math.ceil(((i + 1) * h) / out))
      const cols: tf.Tensor4D[] = []
      for (let j = 0; j < out; j++) {
        const c0 = Math.floor((j * w) / out)
        const c1 = Math.max(c0 + 1, Math.ceil(((j + 1) * w) / out))
        const cell = x
          .slice([0, r0, c0, 0], [-1, r1 - r0, c1 - c0, -1])
          .mean([1, 2], true)
        cols.push(cell as tf.Tensor4D)
      }
      rows.push(tf.concat(cols, 2) as tf.Tensor4D)
    }
    return tf.concat(rows, 1) as tf.Tensor4D
  })
}

// --------------------------------------------------------------------------
// architectures
// --------------------------------------------------------------------------

const VGG16_CFG: (number | 'M')[] = [
  64, 64, 'M', 128, 128, 'M', 256, 256, 256, 'M',
  512, 512, 512, 'M', 512, 512, 512, 'M',
]

function vgg16Forward(store: WeightStore, x: tf.Tensor4D): tf.Tensor2D {
  return tf.tidy(() => {
    let y = x
    let cin = 3
    let idx = 0
    for (const item of VGG16_CFG) {
      if (item === 'M') {
        y = tf.maxPool(y, 2, 2, 'same')
      } else {
        y = tf.relu(conv(store, `conv${idx}`, y, cin, item, 3, 1, true))
        cin = item
        idx += 1
      }
    }
    y = adaptiveAvgPool(y, 7)
    const flat = y.reshape([y.shape[0], 7 * 7 * 512]) as tf.Tensor2D
    const w = store.get('fc6/kernel', [7 * 7 * 512, 4096], 7 * 7 * 512)
    const b = store.constant('fc6/bias', [4096], 0)
    return tf.relu(tf.add(tf.matMul(flat, w as tf.Tensor2D), b)) as tf.Tensor2D
  })
}

function basicBlock(
  store: WeightStore,
  name: string,
  x: tf.Tensor4D,
  cin: number,
  cout: number,
  stride: number,
): tf.Tensor4D {
  let y = tf.relu(
    batchNorm(store, `${name}/bn1`, conv(store, `${name}/conv1`, x, cin, cout, 3, stride, false), cout),
  ) as tf.Tensor4D
  y = batchNorm(store, `${name}/bn2`, conv(store, `${name}/conv2`, y, cout, cout, 3, 1, false), cout)
  let skip = x
  if (stride !== 1 || cin !== cout) {
    skip = batchNorm(
      store, `${name}/bn_skip`,
      conv(store, `${name}/conv_skip`, x, cin, cout, 1, stride, false), cout)
  }
  return tf.relu(tf.add(y, skip)) as tf.Tensor4D
}

function bottleneckBlock(
  store: WeightStore,
  name: string,
  x: tf.Tensor4D,
  cin: number,
  cmid: number,
  stride: number,
): tf.Tensor4D {
  const cout = cmid * 4
  let y = tf.relu(
    batchNorm(store, `${name}/bn1`, conv(store, `${name}/conv1`, x, cin, cmid, 1, 1, false), cmid),
  ) as tf.Tensor4D
  y = tf.relu(
    batchNorm(store, `${name}/bn2`, conv(store, `${name}/conv2`, y, cmid, cmid, 3, stride, false), cmid),
  ) as tf.Tensor4D
  y = batchNorm(store, `${name}/bn3`, conv(store, `${name}/conv3`, y, cmid, cout, 1, 1, false), cout)
  let skip = x
  if (stride !== 1 || cin !== cout) {
    skip = batchNorm(
      store, `${name}/bn_skip`,
      conv(store, `${name}/conv_skip`, x, cin, cout, 1, stride, false), cout)
  }
  return tf.relu(tf.add(y, skip)) as tf.Tensor4D
}

function resnetForward(
  store: WeightStore,
  x: tf.Tensor4D,
  blocksPerStage: number[],
  bottleneck: boolean,
): tf.Tensor2D {
  return tf.tidy(() => {
    let y = tf.relu(
      batchNorm(store, 'stem/bn', conv(store, 'stem/conv', x, 3, 64, 7, 2, false), 64),
    ) as tf.Tensor4D
    y = tf.maxPool(y, 3, 2, 'same')
    const widths = [64, 128, 256, 512]
    let cin = 64
    for (let stage = 0; stage < 4; stage++) {
      const cmid = widths[stage]
      for (let block = 0; block < blocksPerStage[stage]; block++) {
        const stride = stage > 0 && block === 0 ? 2 : 1
        const name = `stage${stage}/block${block}`
        if (bottleneck) {
          y = bottleneckBlock(store, name, y, cin, cmid, stride)
          cin = cmid * 4
        } else {
          y = basicBlock(store, name, y, cin, cmid, stride)
          cin = cmid
        }
      }
    }
    return y.mean([1, 2]) as tf.Tensor2D // global average pool
  })
}

// --------------------------------------------------------------------------
// public surface
// --------------------------------------------------------------------------

export class Backbone {
  private store: WeightStore

  constructor(
    readonly spec: ExtractSpec,
    weights?: WeightsFile,
  ) {
    this.store = new WeightStore(spec.seed, weights)
  }

  /** NHWC batch in, [batch, dim] features out. */
  forward(x: tf.Tensor4D): tf.Tensor2D {
    switch (this.spec.backbone) {
      case 'vgg16':
        return vgg16Forward(this.store, x)
      case 'resnet18':
        return resnetForward(this.store, x, [2, 2, 2, 2], false)
      case 'resnet34':
        return resnetForward(this.store, x, [3, 4, 6, 3], false)
      case 'resnet50':
        return resnetForward(this.store, x, [3, 4, 6, 3], true)
    }
  }

  dispose(): void {
    this.store.dispose()
  }
}
