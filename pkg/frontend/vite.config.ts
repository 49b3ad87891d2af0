/// <reference types="vitest/config" />
import { defineConfig } from 'vite';

export default defineConfig({
  server: {
    proxy: { '/api': 'http://127.0.0.1:8000' },
  },
  test: {
    include: ['tests/**/*.test.ts'],
    environment: 'node',
    // the e2e spec trains nothing but does spawn the real service
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
