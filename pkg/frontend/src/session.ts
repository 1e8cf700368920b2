/**
 * Client-side session state machine.
 *
 * Grading advances optimistically: a submission immediately moves the
 * cursor to the next item while the POST runs in the background. Failed
 * posts land in a visible retry queue; the study only counts as complete
 * once every response is confirmed by the server. Items answered in an
 * earlier visit (reported by the resume endpoint) are skipped.
 */

import { StudyApi, ApiError } from "./api.js";

export type PostState = "pending" | "confirmed" | "failed";

export interface Judgment {
  rim: boolean;
  real: boolean;
}

export class StudySession {
  private readonly states = new Map<string, PostState>();
  private readonly judgments = new Map<string, Judgment>();
  private cursor = 0;

  constructor(
    private readonly api: StudyApi,
    public readonly sessionId: string,
    public readonly items: string[],
    public readonly raterId: string,
    alreadyAnswered: string[] = []
  ) {
    for (const itemId of alreadyAnswered) {
      this.states.set(itemId, "confirmed");
    }
    this.cursor = this.firstUnanswered();
  }

  private firstUnanswered(): number {
    for (let i = 0; i < this.items.length; i++) {
      if (!this.states.has(this.items[i])) {
        return i;
      }
    }
    return this.items.length;
  }

  /** Item id under grading, or null when every item has a submission. */
  current(): string | null {
    return this.cursor < this.items.length ? this.items[this.cursor] : null;
  }

  progress(): { confirmed: number; failed: number; total: number } {
    let confirmed = 0;
    let failed = 0;
    for (const state of this.states.values()) {
      if (state === "confirmed") confirmed++;
      if (state === "failed") failed++;
    }
    return { confirmed, failed, total: this.items.length };
  }

  /** True once the server has acknowledged every item. */
  isComplete(): boolean {
    return this.progress().confirmed === this.items.length;
  }

  stateOf(itemId: string): PostState | undefined {
    return this.states.get(itemId);
  }

  failedItems(): string[] {
    return this.items.filter((id) => this.states.get(id) === "failed");
  }

  /**
   * Record both judgments for the current item and advance. The POST is
   * awaited so callers can surface failures, but the cursor has already
   * moved — grading never blocks on the network.
   */
  async submit(judgment: Judgment): Promise<void> {
    const itemId = this.current();
    if (itemId === null) {
      throw new Error("session already fully graded");
    }
    this.judgments.set(itemId, judgment);
    this.states.set(itemId, "pending");
    this.cursor = this.firstUnanswered();
    await this.post(itemId, judgment);
  }

  /** Re-post everything in the failed queue. */
  async retryFailed(): Promise<void> {
    for (const itemId of this.failedItems()) {
      const judgment = this.judgments.get(itemId);
      if (judgment) {
        this.states.set(itemId, "pending");
        await this.post(itemId, judgment);
      }
    }
  }

  private async post(itemId: string, judgment: Judgment): Promise<void> {
    try {
      await this.api.postResponse({
        session_id: this.sessionId,
        item_id: itemId,
        rim_judgment: judgment.rim,
        real_judgment: judgment.real,
        rater_id: this.raterId,
      });
      this.states.set(itemId, "confirmed");
    } catch (err) {
      // 409 = the server already has this (session, item): a retry of a
      // post whose ack was lost. Treat as confirmed.
      if (err instanceof ApiError && err.status === 409) {
        this.states.set(itemId, "confirmed");
        return;
      }
      this.states.set(itemId, "failed");
    }
  }
}

/** Start a fresh session, or resume one by id (skipping answered items). */
export async function openSession(
  api: StudyApi,
  raterId: string,
  sessionId?: string
): Promise<StudySession> {
  if (sessionId) {
    const resumed = await api.resumeSession(sessionId);
    return new StudySession(
      api,
      resumed.session_id,
      resumed.items,
      raterId,
      resumed.answered
    );
  }
  const fresh = await api.newSession();
  return new StudySession(api, fresh.session_id, fresh.items, raterId);
}
