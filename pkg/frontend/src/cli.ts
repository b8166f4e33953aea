#!/usr/bin/env node
/**
 * seqgeo-extract extract --images list.txt --backbone vgg16 --out feats.sgeo
 *
 * Reads newline-separated image paths, runs the chosen backbone, and
 * writes an .sgeo embedding file plus a JSON manifest next to it.
 */

import * as fs from 'node:fs'

import yargs from 'yargs'
import { hideBin } from 'yargs/helpers'

import { BackboneName, makeExtractSpec, readWeightsFile } from './backbones.js'
import { extractToFile } from './extract.js'

async function run(argv: string[]): Promise<number> {
  const args = await yargs(argv)
    .command('extract', 'extract image features to an .sgeo file')
    .demandCommand(1)
    .option('images', { type: 'string', demandOption: true,
                        describe: 'text file, one image path per line' })
    .option('backbone', { choices: ['vgg16', 'resnet18', 'resnet34', 'resnet50'] as const,
                          default: 'vgg16' as BackboneName })
    .option('out', { type: 'string', demandOption: true })
    .option('dim', { type: 'number',
                     describe: 'expected output width (validated against the backbone)' })
    .option('resize', { type: 'number', default: 224,
                        describe: 'square input size (224 = standard recipe)' })
    .option('seed', { type: 'number', default: 0,
                      describe: 'weight seed when no --weights file is given' })
    .option('weights', { type: 'string',
                         describe: 'SGWT weights file (partial files allowed)' })
    .option('on-unreadable', { choices: ['abort', 'skip'] as const, default: 'abort' })
    .option('batch', { type: 'number', default: 4 })
    .strict()
    .parse()

  const paths = fs.readFileSync(args.images, 'utf-8')
    .split('\n').map((l) => l.trim()).filter((l) => l.length > 0)
  const spec = makeExtractSpec({
    backbone: args.backbone as BackboneName,
    dim: args.dim,
    resize: args.resize,
    seed: args.seed,
  })
  const weights = args.weights ? readWeightsFile(args.weights) : undefined
  const result = await extractToFile(paths, spec, args.out, {
    onUnreadable: args.onUnreadable as 'abort' | 'skip',
    batchSize: args.batch,
    weights,
  })
  console.log(JSON.stringify({
    out: args.out,
    n_rows: result.nRows,
    dim: result.dim,
    skipped: result.skipped,
  }))
  return 0
}

run(hideBin(process.argv)).then(
  (code) => process.exit(code),
  (err) => {
    console.error(`error: ${(err as Error).message}`)
    process.exit(1)
  },
)
