/// <reference types="vitest/config" />
import { defineConfig } from 'vite';

// During development the Python service runs separately; proxy every API
// route so the page and the service share an origin.
const API_ROUTES = [
  '/keyframes',
  '/preview',
  '/clicks',
  '/schema',
  '/query',
  '/mesh',
  '/stats',
  '/events',
];

export default defineConfig({
  server: {
    proxy: Object.fromEntries(API_ROUTES.map((route) => [route, 'http://127.0.0.1:8000'])),
  },
  test: {
    environment: 'node',
    testTimeout: 240_000,
    hookTimeout: 240_000,
    // the round-trip suite trains a live field; run files one at a time
    fileParallelism: false,
  },
});
