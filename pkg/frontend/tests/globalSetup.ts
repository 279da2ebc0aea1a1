/**
 * Contract-test setup: ensure the trained desk fixture exists (delegated to
 * the engine's fixture builder, cached across runs), start a featfield
 * server on it, and hand the URL plus dataset location to the tests.
 */

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";

const REPO = resolve(__dirname, "..", "..");
const PORT = 8814;

let server: ChildProcess | null = null;

async function waitForHealth(url: string, timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const resp = await fetch(url + "/healthz");
      if (resp.ok) return;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) throw new Error("server did not come up");
    await new Promise((r) => setTimeout(r, 300));
  }
}

export default async function setup(): Promise<() => void> {
  const fixture = spawnSync(
    "python3", [join(REPO, "tests", "desk_fixture.py")],
    { cwd: REPO, encoding: "utf-8", timeout: 1800_000 },
  );
  if (fixture.status !== 0) {
    throw new Error(`fixture build failed:\n${fixture.stderr}`);
  }
  const lines = fixture.stdout.trim().split("\n");
  const info = JSON.parse(lines[lines.length - 1]) as {
    checkpoint: string;
    dataset: string;
  };

  const env = { ...process.env, FEATFIELD_PORT: String(PORT) };
  server = spawn(
    "python3",
    ["-m", "featfield", "serve", "--ckpt", info.checkpoint,
     "--host", "127.0.0.1", "--port", String(PORT), "--workers", "2"],
    { cwd: REPO, env, stdio: ["ignore", "pipe", "pipe"] },
  );
  server.stderr?.on("data", () => undefined);

  const base = `http://127.0.0.1:${PORT}`;
  await waitForHealth(base, 120_000);

  const handoff = join(mkdtempSync(join(tmpdir(), "featfield-ui-")),
                       "contract.json");
  writeFileSync(handoff, JSON.stringify({ base, ...info }));
  process.env.FEATFIELD_CONTRACT_INFO = handoff;

  return () => {
    server?.kill("SIGTERM");
  };
}
