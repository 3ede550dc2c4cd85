// @vitest-environment jsdom
// End-to-end round trip against a live review service: plan one synthetic
// case with the scripted policy, then drive the page through list -> detail
// -> Refine (default text) -> round-2 review -> Accept.
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawn, execFileSync, type ChildProcess } from "node:child_process";
import { existsSync, mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";

import { createApp, type App } from "../src/app.js";
import { ReviewApi } from "../src/api.js";

const PYTHON = process.env.SRSPLAN_PYTHON ?? "python3";
const FAST_COHORT = {
  grid_dims: [40, 40, 40],
  ptv_radius_range_mm: [4.5, 5.5],
};
// vitest runs with the package root as cwd
const DIST = resolve("dist");
const HAS_STATIC = existsSync(join(DIST, "index.html"));

let workDir: string;
let server: ChildProcess | undefined;
let base: string;
let api: ReviewApi;

async function waitFor(check: () => boolean, what: string, timeoutMs = 90_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (!check()) {
    if (Date.now() >= deadline) throw new Error(`timed out waiting for ${what}`);
    await new Promise((resolve) => setTimeout(resolve, 25));
  }
}

async function waitForServer(url: string): Promise<void> {
  const deadline = Date.now() + 30_000;
  for (;;) {
    try {
      const response = await fetch(url);
      if (response.ok) return;
    } catch {
      // not listening yet
    }
    if (Date.now() >= deadline) throw new Error(`review service never came up at ${url}`);
    await new Promise((resolve) => setTimeout(resolve, 200));
  }
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "srsplan-ui-"));
  const specPath = join(workDir, "cohort.json");
  writeFileSync(specPath, JSON.stringify(FAST_COHORT));
  const caseDir = join(workDir, "cases");
  const storeDir = join(workDir, "store");

  execFileSync(
    PYTHON,
    ["-m", "srsplan.cli", "generate-cases", "--spec", specPath, "--out", caseDir, "--count", "1", "--seed", "3"],
    { stdio: "pipe" },
  );
  const manifest = JSON.parse(readFileSync(join(caseDir, "manifest.json"), "utf8")) as Array<{ file: string }>;
  execFileSync(
    PYTHON,
    ["-m", "srsplan.cli", "plan", "--case", join(caseDir, manifest[0]!.file), "--policy", "scripted", "--out", storeDir],
    { stdio: "pipe" },
  );

  const port = 20000 + Math.floor(Math.random() * 20000);
  base = `http://127.0.0.1:${port}`;
  const args = ["-m", "srsplan.cli", "serve", "--store", storeDir, "--port", String(port), "--host", "127.0.0.1"];
  if (HAS_STATIC) args.push("--static", DIST);
  server = spawn(PYTHON, args, { stdio: "ignore" });
  await waitForServer(`${base}/sessions`);
  api = new ReviewApi(base);
}, 180_000);

afterAll(() => {
  server?.kill("SIGTERM");
  if (workDir) rmSync(workDir, { recursive: true, force: true });
});

describe("review round trip", () => {
  it("walks list -> detail -> Refine -> round 2 -> Accept against the live service", async () => {
    const root = document.createElement("div");
    document.body.replaceChildren(root);
    window.location.hash = "";
    const app: App = createApp(root, api);
    await app.start();

    // Session list: one freshly planned session awaiting review.
    const rows = root.querySelectorAll<HTMLElement>(".session-row");
    expect(rows.length).toBe(1);
    const sessionId = rows[0]!.dataset.sessionId!;
    expect(sessionId).toBeTruthy();
    expect(rows[0]!.querySelector(".status-AwaitingReview")).not.toBeNull();

    // Clicking the row navigates (hash route) to the detail view.
    rows[0]!.click();
    await waitFor(() => app.currentDetail()?.id === sessionId, "detail view");
    const round1 = app.currentDetail()!;
    expect(round1.round).toBe(1);
    expect(round1.status).toBe("AwaitingReview");
    expect(root.querySelector("#dvh-section svg")).not.toBeNull();
    expect(root.querySelectorAll("#iteration-log .iteration").length).toBeGreaterThan(0);

    // The refine box comes pre-filled with the service's standard text.
    const textarea = root.querySelector<HTMLTextAreaElement>("#refine-text")!;
    expect(textarea.value).toBe(round1.standard_refinement_text);
    expect(textarea.value.length).toBeGreaterThan(0);

    // Blank text is rejected client-side without posting a decision.
    textarea.value = "   ";
    root.querySelector<HTMLElement>("#refine-button")!.click();
    await waitFor(() => root.querySelector(".notice") !== null, "blank-text notice");
    expect(root.querySelector(".notice")!.textContent).toContain("must not be empty");
    expect((await api.getSession(sessionId)).decisions.length).toBe(0);

    // Refine with the default prompt and wait out the background replan.
    textarea.value = round1.standard_refinement_text;
    root.querySelector<HTMLElement>("#refine-button")!.click();
    await waitFor(
      () => app.currentDetail()?.round === 2 && app.currentDetail()?.status === "AwaitingReview",
      "round 2 review",
    );

    // Round-2 metrics are up and shown next to round 1.
    const round2 = app.currentDetail()!;
    expect(Object.keys(round2.selected).sort()).toEqual(["1", "2"]);
    const record2 = round2.iterations.find((it) => it.round === 2 && it.index === round2.selected["2"]);
    expect(record2?.metrics?.ci).toBeTypeOf("number");
    const ciCell = root.querySelector('#round-comparison td[data-round="2"][data-metric="ci"]')!;
    expect(Number(ciCell.textContent)).toBeGreaterThan(0);
    expect(round2.decisions.length).toBe(1);
    expect(round2.decisions[0]!.verdict).toBe("Refine");
    expect(round2.decisions[0]!.refinement_text).toBe(round1.standard_refinement_text);

    // Accept the refined plan.
    root.querySelector<HTMLElement>("#accept-button")!.click();
    await waitFor(() => app.currentDetail()?.status === "Accepted", "accepted state");
    expect(root.querySelector(".chip.status-Accepted")).not.toBeNull();
    expect(root.querySelector("#accept-button")).toBeNull();
    expect(root.querySelector("#refine-text")).toBeNull();

    // The list reflects the final state.
    const summaries = await api.listSessions();
    expect(summaries.find((s) => s.id === sessionId)?.status).toBe("Accepted");
  }, 180_000);

  it.skipIf(!HAS_STATIC)("serves the built page and stylesheet itself", async () => {
    const page = await fetch(`${base}/`);
    expect(page.ok).toBe(true);
    expect(await page.text()).toContain('id="app"');
    const css = await fetch(`${base}/styles.css`);
    expect(css.ok).toBe(true);
  });
});
