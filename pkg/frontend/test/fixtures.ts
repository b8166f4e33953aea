/** Deterministic tiny PNG fixtures written into a temp directory. */

import * as fs from 'node:fs'
import * as os from 'node:os'
import * as path from 'node:path'
import { PNG } from 'pngjs'

import { mulberry32 } from '../src/prng.js'

export function makeFixtureDir(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), 'seqgeo-extract-'))
}

/** Gradient-plus-noise pattern; distinct per seed, identical per (seed, size). */
export function writePng(
  dir: string,
  name: string,
  width: number,
  height: number,
  seed: number,
): string {
  const png = new PNG({ width, height })
  const rand = mulberry32(seed)
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = (y * width + x) * 4
      png.data[i] = (x * 255 / width + rand() * 40) & 0xff
      png.data[i + 1] = (y * 255 / height + rand() * 40) & 0xff
      png.data[i + 2] = ((x + y) * 128 / (width + height) + rand() * 40) & 0xff
      png.data[i + 3] = 255
    }
  }
  const file = path.join(dir, name)
  fs.writeFileSync(file, PNG.sync.write(png))
  return file
}
