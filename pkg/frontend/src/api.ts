import type { SessionDetail, SessionListResponse, SessionSummary, Verdict } from "./types.js";

export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
    this.status = status;
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let detail = `${response.status} ${response.statusText}`;
  try {
    const body = (await response.json()) as { detail?: string };
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status line
  }
  return new ApiError(response.status, detail);
}

export interface PollOptions {
  intervalMs?: number;
  timeoutMs?: number;
}

export class ReviewApi {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, {
      headers: { Accept: "application/json" },
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  async listSessions(): Promise<SessionSummary[]> {
    const body = await this.get<SessionListResponse>("/sessions");
    return body.sessions;
  }

  async getSession(id: string): Promise<SessionDetail> {
    return this.get<SessionDetail>(`/sessions/${encodeURIComponent(id)}`);
  }

  async submitDecision(id: string, verdict: Verdict, text?: string): Promise<SessionSummary> {
    const body: Record<string, string> = { verdict };
    if (text !== undefined) body.text = text;
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${encodeURIComponent(id)}/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json", Accept: "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as SessionSummary;
  }

  /** After a Refine decision the service plans the next round (possibly in the
   * background, observable as status "Refined"); poll until the session is
   * awaiting review again at a later round, or fails. */
  async pollUntilAwaitingReview(
    id: string,
    afterRound: number,
    options: PollOptions = {},
  ): Promise<SessionDetail> {
    const interval = options.intervalMs ?? 500;
    const deadline = Date.now() + (options.timeoutMs ?? 120_000);
    for (;;) {
      const detail = await this.getSession(id);
      if (detail.status === "AwaitingReview" && detail.round > afterRound) return detail;
      if (detail.status === "Failed") {
        throw new ApiError(500, `session ${id} failed while refining`);
      }
      if (Date.now() >= deadline) {
        throw new ApiError(504, `timed out waiting for session ${id} to finish refining`);
      }
      await new Promise((resolve) => setTimeout(resolve, interval));
    }
  }
}
