/**
 * Client for the review server's HTTP API. The UI keeps no state of its
 * own beyond what these calls return.
 */

export interface QueueItem {
  id: string;
  session_id: string;
  phase: string;
  description: string;
  start_s: number;
  stop_s: number;
  present: boolean;
  source: string;
  status: "pending" | "finalized";
  decision: string | null;
}

export interface QueueResponse {
  items: QueueItem[];
  pending: number;
  reviewed: number;
  total: number;
  tolerance_s: number;
}

export interface ExcerptSentence {
  start: number;
  end: number;
  speaker: string;
  text: string;
}

export interface ProposalDetail extends QueueItem {
  duration_s: number;
  start_excerpt: ExcerptSentence[];
  stop_excerpt: ExcerptSentence[];
}

export interface VerdictBody {
  decision: "accept" | "correct" | "reject-label";
  rater_id: string;
  corrected_start_s?: number;
  corrected_stop_s?: number;
}

export interface Stats {
  timestamp_accuracy: number | null;
  label_accuracy: number | null;
  tolerance_s: number;
  n_timestamps: number;
  n_labels: number;
}

export class ConflictError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ConflictError";
  }
}

export class ReviewApi {
  constructor(private baseUrl: string = "") {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(this.baseUrl + path);
    if (!resp.ok) {
      throw new Error(`GET ${path} failed: ${resp.status}`);
    }
    return resp.json() as Promise<T>;
  }

  getQueue(): Promise<QueueResponse> {
    return this.getJson("/api/queue");
  }

  getProposal(id: string): Promise<ProposalDetail> {
    return this.getJson(`/api/proposal/${encodeURIComponent(id)}`);
  }

  /** URL of the padded audio slice around one boundary of a proposal. */
  audioUrl(id: string, boundary: "start" | "end", padS = 15): string {
    return `${this.baseUrl}/api/proposal/${encodeURIComponent(id)}/audio` +
      `?pad=${padS}&boundary=${boundary}`;
  }

  async postVerdict(id: string, body: VerdictBody): Promise<void> {
    const resp = await fetch(
      `${this.baseUrl}/api/proposal/${encodeURIComponent(id)}/verdict`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(body),
      });
    if (resp.status === 409) {
      throw new ConflictError(`proposal ${id} already finalized`);
    }
    if (!resp.ok) {
      throw new Error(`verdict on ${id} failed: ${resp.status}`);
    }
  }

  getStats(): Promise<Stats> {
    return this.getJson("/api/stats");
  }
}
