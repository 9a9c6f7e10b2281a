import { describe, expect, it } from "vitest";

import type { SessionCase } from "../src/api.js";
import {
  isPermutation,
  moveLabel,
  nextPendingCase,
  sessionProgress,
} from "../src/state.js";

function makeCases(n: number, doneFor: Record<string, number> = {}): SessionCase[] {
  const cases: SessionCase[] = [];
  for (let i = 0; i < n; i += 1) {
    const status: Record<string, boolean> = {};
    for (const [rater, count] of Object.entries(doneFor)) {
      status[rater] = i < count;
    }
    cases.push({ id: `case${i + 1}`, status });
  }
  return cases;
}

describe("sessionProgress", () => {
  it("reports 0 of 29 for a fresh session", () => {
    expect(sessionProgress(makeCases(29), "r1")).toEqual({ done: 0, total: 29 });
  });

  it("reports 5 of 29 for a resumed session", () => {
    const cases = makeCases(29, { r1: 5 });
    expect(sessionProgress(cases, "r1")).toEqual({ done: 5, total: 29 });
  });

  it("is per rater", () => {
    const cases = makeCases(4, { r1: 3, r2: 1 });
    expect(sessionProgress(cases, "r2")).toEqual({ done: 1, total: 4 });
    expect(sessionProgress(cases, "r3")).toEqual({ done: 0, total: 4 });
  });

  it("handles an empty session", () => {
    expect(sessionProgress([], "r1")).toEqual({ done: 0, total: 0 });
  });
});

describe("nextPendingCase", () => {
  it("returns the first pending case from the start", () => {
    const cases = makeCases(3, { r1: 1 });
    expect(nextPendingCase(cases, "r1")).toBe("case2");
  });

  it("advances past the case just completed, wrapping", () => {
    const cases = makeCases(3, { r1: 0 });
    const c = cases[2];
    if (c) {
      c.status["r1"] = true;
    }
    expect(nextPendingCase(cases, "r1", "case3")).toBe("case1");
  });

  it("returns null when everything is complete", () => {
    expect(nextPendingCase(makeCases(3, { r1: 3 }), "r1")).toBeNull();
    expect(nextPendingCase([], "r1")).toBeNull();
  });
});

describe("moveLabel", () => {
  it("moves an item down and up", () => {
    expect(moveLabel(["A", "B", "C", "D"], 0, 2)).toEqual(["B", "C", "A", "D"]);
    expect(moveLabel(["A", "B", "C", "D"], 3, 1)).toEqual(["A", "D", "B", "C"]);
  });

  it("does not mutate its input", () => {
    const input = ["A", "B"];
    moveLabel(input, 0, 1);
    expect(input).toEqual(["A", "B"]);
  });

  it("ignores out-of-range indices", () => {
    expect(moveLabel(["A", "B"], -1, 0)).toEqual(["A", "B"]);
    expect(moveLabel(["A", "B"], 0, 5)).toEqual(["A", "B"]);
  });
});

describe("isPermutation", () => {
  const labels = ["Method A", "Method B", "Method C"];

  it("accepts any reorder of the labels", () => {
    expect(isPermutation(["Method C", "Method A", "Method B"], labels)).toBe(true);
  });

  it("rejects duplicates, omissions, and strangers", () => {
    expect(isPermutation(["Method A", "Method A", "Method C"], labels)).toBe(false);
    expect(isPermutation(["Method A", "Method B"], labels)).toBe(false);
    expect(isPermutation(["Method A", "Method B", "Method Z"], labels)).toBe(false);
    expect(isPermutation(["Method A", "Method B", "Method C", "Method C"], labels)).toBe(false);
  });
});
