/**
 * Pure view-model for the review queue. Every field is derived from API
 * responses; reloading the page and replaying the same responses rebuilds
 * an identical state. Edited boundary times are fixed-point strings so
 * nudge arithmetic never drifts.
 */

import { ProposalDetail, QueueItem, QueueResponse, VerdictBody } from "./api.js";
import { fromCentis, nudge, toCentis, toNumber } from "./decimal.js";

export interface BoundaryEdit {
  start: string;
  stop: string;
}

export interface ReviewState {
  items: QueueItem[];
  pending: number;
  reviewed: number;
  total: number;
  toleranceS: number;
  selectedId: string | null;
  detail: ProposalDetail | null;
  edit: BoundaryEdit | null;
  banner: string | null;
}

export function initialState(): ReviewState {
  return {
    items: [], pending: 0, reviewed: 0, total: 0, toleranceS: 0,
    selectedId: null, detail: null, edit: null, banner: null,
  };
}

export function pendingItems(state: ReviewState): QueueItem[] {
  return state.items.filter((i) => i.status === "pending");
}

/** "3/9 reviewed" style progress label. */
export function progressLabel(state: ReviewState): string {
  return `${state.reviewed}/${state.total} reviewed`;
}

export function queueLoaded(state: ReviewState, resp: QueueResponse): ReviewState {
  const next: ReviewState = {
    ...state,
    items: resp.items,
    pending: resp.pending,
    reviewed: resp.reviewed,
    total: resp.total,
    toleranceS: resp.tolerance_s,
    banner: null,
  };
  const stillPending = resp.items.some(
    (i) => i.id === state.selectedId && i.status === "pending");
  if (!stillPending) {
    const first = resp.items.find((i) => i.status === "pending");
    next.selectedId = first ? first.id : null;
    next.detail = null;
    next.edit = null;
  }
  return next;
}

export function select(state: ReviewState, id: string): ReviewState {
  return { ...state, selectedId: id, detail: null, edit: null };
}

export function selectStep(state: ReviewState, step: 1 | -1): ReviewState {
  const pending = pendingItems(state);
  if (pending.length === 0) {
    return state;
  }
  const idx = pending.findIndex((i) => i.id === state.selectedId);
  const next = pending[(idx + step + pending.length) % pending.length];
  return select(state, next.id);
}

export function detailLoaded(state: ReviewState, detail: ProposalDetail): ReviewState {
  if (detail.id !== state.selectedId) {
    return state;
  }
  return {
    ...state,
    detail,
    edit: {
      start: fromCentis(toCentis(detail.start_s)),
      stop: fromCentis(toCentis(detail.stop_s)),
    },
  };
}

/** Nudge the edited start or stop by a step in tenths of a second. */
export function nudgeEdit(state: ReviewState, which: keyof BoundaryEdit,
                          tenths: number): ReviewState {
  if (!state.edit) {
    return state;
  }
  return { ...state, edit: { ...state.edit, [which]: nudge(state.edit[which], tenths) } };
}

export function edited(state: ReviewState): boolean {
  if (!state.detail || !state.edit) {
    return false;
  }
  return toCentis(state.edit.start) !== toCentis(state.detail.start_s)
    || toCentis(state.edit.stop) !== toCentis(state.detail.stop_s);
}

/**
 * Verdict for the current proposal: Accept posts as-is, Confirm after any
 * nudge posts a correction with the exact edited decimals, Reject marks the
 * phase label wrong.
 */
export function buildVerdict(state: ReviewState, kind: "accept" | "confirm" | "reject",
                             raterId: string): VerdictBody {
  if (kind === "reject") {
    return { decision: "reject-label", rater_id: raterId };
  }
  if (kind === "confirm" && state.edit && edited(state)) {
    return {
      decision: "correct",
      rater_id: raterId,
      corrected_start_s: toNumber(state.edit.start),
      corrected_stop_s: toNumber(state.edit.stop),
    };
  }
  return { decision: "accept", rater_id: raterId };
}

export function serverUnreachable(state: ReviewState, message: string): ReviewState {
  return { ...state, banner: message };
}

/** A 409 means someone finalized it first; drop local edits and move on. */
export function conflictOnSelected(state: ReviewState): ReviewState {
  return { ...state, detail: null, edit: null };
}
