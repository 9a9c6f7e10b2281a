/** Durable retry queue for ranking submissions.
 *
 * One entry per (rater, case) — re-queueing the same key overwrites, so
 * replaying after reconnect performs exactly one POST per completed
 * ranking. Entries persist in storage so a reload does not lose them.
 */

import type { RankingPayload, SubmitResult } from "./api.js";

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

export interface FlushOutcome {
  key: string;
  result: SubmitResult;
}

const STORAGE_KEY = "pending-rankings";

export function idempotentKey(rater: string, caseId: string): string {
  return `${rater}::${caseId}`;
}

export class RetryQueue {
  private storage: StorageLike;
  private flushing = false;

  constructor(storage: StorageLike) {
    this.storage = storage;
  }

  private read(): Record<string, RankingPayload> {
    const raw = this.storage.getItem(STORAGE_KEY);
    if (!raw) {
      return {};
    }
    try {
      return JSON.parse(raw) as Record<string, RankingPayload>;
    } catch {
      return {};
    }
  }

  private write(table: Record<string, RankingPayload>): void {
    this.storage.setItem(STORAGE_KEY, JSON.stringify(table));
  }

  enqueue(payload: RankingPayload): void {
    const table = this.read();
    table[idempotentKey(payload.rater, payload.case_id)] = payload;
    this.write(table);
  }

  size(): number {
    return Object.keys(this.read()).length;
  }

  pending(): RankingPayload[] {
    return Object.values(this.read());
  }

  /** Replay every queued payload through `post`, serially. Accepted and
   * rejected entries leave the queue (a rejection is surfaced to the
   * caller, not retried forever); offline entries stay for next time. */
  async flush(
    post: (payload: RankingPayload) => Promise<SubmitResult>,
  ): Promise<FlushOutcome[]> {
    if (this.flushing) {
      return [];
    }
    this.flushing = true;
    try {
      const outcomes: FlushOutcome[] = [];
      for (const [key, payload] of Object.entries(this.read())) {
        const result = await post(payload);
        outcomes.push({ key, result });
        if (result.kind !== "offline") {
          const table = this.read();
          delete table[key];
          this.write(table);
        }
      }
      return outcomes;
    } finally {
      this.flushing = false;
    }
  }
}
