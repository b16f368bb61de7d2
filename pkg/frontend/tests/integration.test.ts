/**
 * End-to-end review round trip against the real review server.
 *
 * The corpus, annotator seed, tolerance, and verdict sequence here mirror
 * the terminal-verify equivalence check in the backend's acceptance suite:
 * both paths must produce timestamp accuracy 17/18 over 9 proposals.
 */

import { ChildProcess, execFileSync, spawn } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ReviewApi } from "../src/api.js";
import * as S from "../src/state.js";

const PORT = 8700 + (process.pid % 250);
const BASE = `http://127.0.0.1:${PORT}`;
const TOLERANCE_S = 1.0;

const MAKE_CORPUS = `
import sys
from peloc import supervision, synth
from peloc.supervision import MockAnnotator, annotate
from peloc import ingest

out = sys.argv[1]
cfg = synth.SynthConfig(
    n_sessions=3,
    duration_mean_s=200.0, duration_std_s=20.0,
    duration_min_s=170.0, duration_max_s=260.0,
    phase_means_min=(0.5, 1.8, 0.5),
    seed=123)
sessions, _ = synth.generate_corpus(cfg, out)
annotator = MockAnnotator(jitter_s=2.0, seed=5)
proposals = []
for s in sessions:
    proposals.extend(annotate(s, "text", annotator))
supervision.save_proposals(proposals, out + "/proposals.jsonl")
print("ready")
`;

let corpusDir: string;
let server: ChildProcess;

async function waitForServer(api: ReviewApi, tries = 60): Promise<void> {
  for (let i = 0; i < tries; i++) {
    try {
      await api.getQueue();
      return;
    } catch {
      await new Promise((r) => setTimeout(r, 500));
    }
  }
  throw new Error("review server did not come up");
}

beforeAll(async () => {
  corpusDir = mkdtempSync(join(tmpdir(), "peloc-ui-"));
  execFileSync("python3", ["-c", MAKE_CORPUS, corpusDir], { stdio: "pipe" });
  server = spawn("python3", [
    "-m", "peloc.cli", "review-serve", "--corpus", corpusDir,
    "--port", String(PORT), "--tolerance", String(TOLERANCE_S),
  ], { stdio: "ignore" });
  await waitForServer(new ReviewApi(BASE));
}, 90_000);

afterAll(() => {
  server?.kill();
  rmSync(corpusDir, { recursive: true, force: true });
});

describe("review round trip through the UI layer", () => {
  it("corrects the first proposal by two +1.0s nudges and accepts the rest", async () => {
    const api = new ReviewApi(BASE);
    let state = S.queueLoaded(S.initialState(), await api.getQueue());
    expect(state.total).toBe(9);
    expect(state.pending).toBe(9);

    // first pending proposal: nudge start +1.0s twice, confirm the correction
    const firstId = state.selectedId!;
    const detail = await api.getProposal(firstId);
    state = S.detailLoaded(state, detail);
    const originalStart = state.edit!.start;
    state = S.nudgeEdit(state, "start", 10);
    state = S.nudgeEdit(state, "start", 10);
    const verdict = S.buildVerdict(state, "confirm", "ui-rater");
    expect(verdict.decision).toBe("correct");
    expect(verdict.corrected_start_s).toBeCloseTo(detail.start_s + 2.0, 9);
    await api.postVerdict(firstId, verdict);

    state = S.queueLoaded(state, await api.getQueue());
    const firstNow = state.items.find((i) => i.id === firstId)!;
    expect(firstNow.status).toBe("finalized");
    expect(firstNow.decision).toBe("correct");
    expect(S.pendingItems(state)).toHaveLength(8);
    expect(S.progressLabel(state)).toBe("1/9 reviewed");

    // accept everything else
    while (S.pendingItems(state).length > 0) {
      const id = state.selectedId!;
      state = S.detailLoaded(state, await api.getProposal(id));
      await api.postVerdict(id, S.buildVerdict(state, "accept", "ui-rater"));
      state = S.queueLoaded(state, await api.getQueue());
    }
    expect(state.pending).toBe(0);
    expect(S.progressLabel(state)).toBe("9/9 reviewed");

    // the same sequence through the terminal verify path must match these
    const stats = await api.getStats();
    expect(stats.n_labels).toBe(9);
    expect(stats.n_timestamps).toBe(18);
    expect(stats.label_accuracy).toBe(1.0);
    expect(stats.timestamp_accuracy).toBeCloseTo(17 / 18, 12);
    expect(stats.tolerance_s).toBe(TOLERANCE_S);

    // nudge exactness witnessed server-side: original start plus exactly 2.00
    const after = await api.getProposal(firstId);
    expect(after.status).toBe("finalized");
    const [whole, frac] = originalStart.split(".");
    const expected = `${Number(whole) + 2}.${frac}`;
    expect(S.nudgeEdit(
      S.detailLoaded(S.select(state, firstId), { ...after }),
      "start", 20).edit!.start).toBe(expected);
  }, 60_000);

  it("second verdict on a finalized proposal conflicts with 409", async () => {
    const api = new ReviewApi(BASE);
    const queue = await api.getQueue();
    const done = queue.items.find((i) => i.status === "finalized")!;
    await expect(api.postVerdict(done.id, { decision: "reject-label", rater_id: "x" }))
      .rejects.toHaveProperty("name", "ConflictError");
  });

  it("audio endpoint serves RIFF WAV for both boundaries", async () => {
    const api = new ReviewApi(BASE);
    const queue = await api.getQueue();
    for (const boundary of ["start", "end"] as const) {
      const resp = await fetch(api.audioUrl(queue.items[0].id, boundary, 5));
      expect(resp.status).toBe(200);
      expect(resp.headers.get("content-type")).toBe("audio/wav");
      const bytes = new Uint8Array(await resp.arrayBuffer());
      expect(String.fromCharCode(...bytes.slice(0, 4))).toBe("RIFF");
      expect(String.fromCharCode(...bytes.slice(8, 12))).toBe("WAVE");
    }
  });
});
