/**
 * Typed client for the blinded reader-study HTTP API.
 *
 * Every payload type here mirrors the server exactly; note the complete
 * absence of any "source" (real/synthetic truth) field — the server
 * never sends it and the client never asks for it.
 */

export interface NewSession {
  session_id: string;
  items: string[];
}

export interface ResumedSession extends NewSession {
  answered: string[];
}

export interface Response {
  session_id: string;
  item_id: string;
  rim_judgment: boolean;
  real_judgment: boolean;
  rater_id: string;
}

export interface ReportRow {
  n_responses: number;
  rim_lesion_fraction: number | null;
  real_image_fraction: number | null;
}

export interface KappaEntry {
  n_items: number;
  rim_kappa: number | null;
  real_kappa: number | null;
}

export interface Report {
  rows: Record<string, ReportRow>;
  kappa: Record<string, KappaEntry>;
  published_reference: Record<string, unknown>;
}

export type FetchLike = (
  input: string,
  init?: RequestInit
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

/** Thrown for non-2xx responses so callers can branch on status. */
export class ApiError extends Error {
  constructor(public readonly status: number, message: string) {
    super(message);
  }
}

export class StudyApi {
  /** `fetchImpl` is injectable so tests can run without a server. */
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = fetch
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await this.fetchImpl(this.base + path);
    if (!resp.ok) {
      throw new ApiError(resp.status, `GET ${path} -> ${resp.status}`);
    }
    return (await resp.json()) as T;
  }

  newSession(): Promise<NewSession> {
    return this.getJson<NewSession>("/api/session");
  }

  resumeSession(sessionId: string): Promise<ResumedSession> {
    return this.getJson<ResumedSession>(`/api/session/${sessionId}`);
  }

  imageUrl(itemId: string): string {
    return `${this.base}/api/item/${itemId}/image`;
  }

  async postResponse(response: Response): Promise<void> {
    const resp = await this.fetchImpl(`${this.base}/api/response`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(response),
    });
    if (!resp.ok) {
      throw new ApiError(resp.status, `POST /api/response -> ${resp.status}`);
    }
  }

  report(): Promise<Report> {
    return this.getJson<Report>("/api/report");
  }
}
