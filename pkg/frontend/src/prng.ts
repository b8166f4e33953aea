/**
 * Seeded pseudo-random streams for deterministic weight initialization.
 *
 * Weight material must be reproducible byte-for-byte across runs and
 * platforms, so no Math.random() and no library initializers: a mulberry32
 * stream feeds a Box-Muller gaussian, consumed in declaration order.
 */

export function mulberry32(seed: number): () => number {
  let a = seed >>> 0
  return () => {
    a = (a + 0x6d2b79f5) >>> 0
    let t = a
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

export function gaussian(rand: () => number): () => number {
  let spare: number | null = null
  return () => {
    if (spare !== null) {
      const v = spare
      spare = null
      return v
    }
    let u = 0
    let v = 0
    // avoid log(0)
    while (u === 0) u = rand()
    v = rand()
    const r = Math.sqrt(-2.0 * Math.log(u))
    spare = r * Math.sin(2.0 * Math.PI * v)
    return r * Math.cos(2.0 * Math.PI * v)
  }
}

/** Float32 gaussian buffer with the given std, fp32-rounded per element. */
export function normalFloat32(
  next: () => number,
  size: number,
  std: number,
): Float32Array {
  const out = new Float32Array(size)
  for (let i = 0; i < size; i++) {
    out[i] = Math.fround(next() * std)
  }
  return out
}
