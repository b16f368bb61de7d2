/**
 * DOM rendering and event wiring. All mutations flow through the pure
 * state module; every server response triggers a re-render from scratch.
 */

import { ConflictError, ReviewApi } from "./api.js";
import * as S from "./state.js";

const NUDGE_KEYS: Record<string, { which: "start" | "stop"; tenths: number }> = {
  "[": { which: "start", tenths: -10 },
  "]": { which: "start", tenths: +10 },
  "{": { which: "start", tenths: -1 },
  "}": { which: "start", tenths: +1 },
  ",": { which: "stop", tenths: -10 },
  ".": { which: "stop", tenths: +10 },
  "<": { which: "stop", tenths: -1 },
  ">": { which: "stop", tenths: +1 },
};

export class ReviewApp {
  state = S.initialState();

  constructor(private api: ReviewApi, private root: HTMLElement,
              private raterId: string = "rater") {}

  async start(): Promise<void> {
    document.addEventListener("keydown", (e) => this.onKey(e));
    await this.refresh();
  }

  async refresh(): Promise<void> {
    try {
      this.state = S.queueLoaded(this.state, await this.api.getQueue());
    } catch (err) {
      this.state = S.serverUnreachable(this.state, `Server unreachable: ${err}`);
      this.render();
      return;
    }
    if (this.state.selectedId && !this.state.detail) {
      try {
        const detail = await this.api.getProposal(this.state.selectedId);
        this.state = S.detailLoaded(this.state, detail);
      } catch (err) {
        this.state = S.serverUnreachable(this.state, `Proposal load failed: ${err}`);
      }
    }
    this.render();
  }

  async submit(kind: "accept" | "confirm" | "reject"): Promise<void> {
    if (!this.state.selectedId) {
      return;
    }
    const verdict = S.buildVerdict(this.state, kind, this.raterId);
    try {
      await this.api.postVerdict(this.state.selectedId, verdict);
    } catch (err) {
      if (err instanceof ConflictError) {
        this.state = S.conflictOnSelected(this.state);
      } else {
        this.state = S.serverUnreachable(this.state, `Verdict failed: ${err}`);
        this.render();
        return;
      }
    }
    await this.refresh();
  }

  nudge(which: "start" | "stop", tenths: number): void {
    this.state = S.nudgeEdit(this.state, which, tenths);
    this.render();
  }

  onKey(e: KeyboardEvent): void {
    if (e.key === "a") {
      void this.submit("accept");
    } else if (e.key === "Enter" || e.key === "c") {
      void this.submit("confirm");
    } else if (e.key === "x") {
      void this.submit("reject");
    } else if (e.key === "j") {
      this.state = S.selectStep(this.state, 1);
      void this.refresh();
    } else if (e.key === "k") {
      this.state = S.selectStep(this.state, -1);
      void this.refresh();
    } else if (NUDGE_KEYS[e.key]) {
      const { which, tenths } = NUDGE_KEYS[e.key];
      this.nudge(which, tenths);
    } else {
      return;
    }
    e.preventDefault();
  }

  render(): void {
    const s = this.state;
    this.root.innerHTML = "";
    if (s.banner) {
      const banner = el("div", "banner", s.banner);
      const retry = el("button", "", "Retry");
      retry.addEventListener("click", () => void this.refresh());
      banner.appendChild(retry);
      this.root.appendChild(banner);
    }
    const tolerance = s.toleranceS > 0 ? ` · tolerance ${s.toleranceS}s` : "";
    this.root.appendChild(el("div", "progress", S.progressLabel(s) + tolerance));
    this.root.appendChild(this.renderQueue());
    if (s.detail && s.edit) {
      this.root.appendChild(this.renderDetail());
    } else if (s.total > 0 && s.pending === 0) {
      this.root.appendChild(el("div", "done", "All proposals reviewed."));
    }
  }

  private renderQueue(): HTMLElement {
    const list = el("ul", "queue");
    for (const item of S.pendingItems(this.state)) {
      const li = el("li", item.id === this.state.selectedId ? "selected" : "",
                    `${item.session_id} ${item.phase}  ` +
                    `${item.start_s.toFixed(2)}-${item.stop_s.toFixed(2)}s`);
      li.addEventListener("click", () => {
        this.state = S.select(this.state, item.id);
        void this.refresh();
      });
      list.appendChild(li);
    }
    return list;
  }

  private renderDetail(): HTMLElement {
    const s = this.state;
    const d = s.detail!;
    const edit = s.edit!;
    const panel = el("div", "detail");
    panel.appendChild(el("h2", "", `${d.session_id} ${d.phase}: ${d.description}`));

    for (const which of ["start", "stop"] as const) {
      const row = el("div", "boundary");
      row.appendChild(el("span", "label", which.toUpperCase()));
      const value = el("span", "time", edit[which]);
      value.dataset.which = which;
      row.appendChild(value);
      for (const [text, tenths] of [["-1.0", -10], ["-0.1", -1], ["+0.1", +1], ["+1.0", +10]] as const) {
        const btn = el("button", "nudge", text);
        btn.addEventListener("click", () => this.nudge(which, tenths));
        row.appendChild(btn);
      }
      const audio = document.createElement("audio");
      audio.controls = true;
      audio.src = this.api.audioUrl(d.id, which === "start" ? "start" : "end");
      row.appendChild(audio);
      panel.appendChild(row);
    }

    for (const [title, sentences] of [["Around start", d.start_excerpt],
                                      ["Around stop", d.stop_excerpt]] as const) {
      const block = el("div", "excerpt");
      block.appendChild(el("h3", "", title));
      for (const sent of sentences) {
        block.appendChild(el("p", sent.speaker,
                             `[${sent.start.toFixed(2)}] ${sent.speaker}: ${sent.text}`));
      }
      panel.appendChild(block);
    }

    const actions = el("div", "actions");
    for (const [label, kind] of [["Accept (a)", "accept"], ["Confirm correction (c)", "confirm"],
                                 ["Reject label (x)", "reject"]] as const) {
      const btn = el("button", kind, label);
      btn.addEventListener("click", () => void this.submit(kind));
      actions.appendChild(btn);
    }
    panel.appendChild(actions);
    panel.appendChild(el("div", "hint",
      "Nudge start: [ ] by 1.0s, { } by 0.1s. Nudge stop: , . by 1.0s, < > by 0.1s."));
    return panel;
  }
}

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}
