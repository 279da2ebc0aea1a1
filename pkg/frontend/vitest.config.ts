import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    globalSetup: process.env.FEATFIELD_CONTRACT ? ["tests/globalSetup.ts"] : [],
    testTimeout: 120000,
    hookTimeout: 1800000,
  },
});
