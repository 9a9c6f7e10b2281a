/** Pure view-state helpers: progress accounting, ranking reorder, and
 * the permutation guard that gates submission. */

import type { SessionCase } from "./api.js";

export interface Progress {
  done: number;
  total: number;
}

/** Cases the given rater has completed, out of all cases. */
export function sessionProgress(
  cases: SessionCase[],
  rater: string,
): Progress {
  const done = cases.filter((c) => c.status[rater] === true).length;
  return { done, total: cases.length };
}

/** The next case this rater has not completed, starting after the given
 * case id (wrapping); null when everything is done. */
export function nextPendingCase(
  cases: SessionCase[],
  rater: string,
  after: string | null = null,
): string | null {
  if (cases.length === 0) {
    return null;
  }
  const start = after === null ? -1 : cases.findIndex((c) => c.id === after);
  for (let k = 1; k <= cases.length; k += 1) {
    const c = cases[(start + k + cases.length) % cases.length];
    if (c !== undefined && c.status[rater] !== true) {
      return c.id;
    }
  }
  return null;
}

/** Move the entry at `from` to position `to`, preserving all others. */
export function moveLabel(
  ranking: readonly string[],
  from: number,
  to: number,
): string[] {
  const out = [...ranking];
  if (from < 0 || from >= out.length || to < 0 || to >= out.length) {
    return out;
  }
  const [item] = out.splice(from, 1);
  out.splice(to, 0, item as string);
  return out;
}

/** True when `ranking` is exactly a permutation of `labels`. */
export function isPermutation(
  ranking: readonly string[],
  labels: readonly string[],
): boolean {
  if (ranking.length !== labels.length) {
    return false;
  }
  const want = new Set(labels);
  const seen = new Set<string>();
  for (const label of ranking) {
    if (!want.has(label) || seen.has(label)) {
      return false;
    }
    seen.add(label);
  }
  return seen.size === want.size;
}
