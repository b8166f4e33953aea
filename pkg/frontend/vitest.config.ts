import { defineConfig } from 'vitest/config'

export default defineConfig({
  test: {
    include: ['test/**/*.test.ts'],
    testTimeout: 300_000,
    hookTimeout: 120_000,
    // tfjs keeps webgl shims happy in a worker; single fork is plenty here
    pool: 'forks',
    maxConcurrency: 1,
  },
})
