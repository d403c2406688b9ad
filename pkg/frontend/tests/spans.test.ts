import { describe, expect, it } from "vitest";

import { objectWords, spansFromSelection, toggleWord, tokenizeWords } from "../src/spans.js";

const CONTEXT = "A dog sitting on a wooden bench.";

describe("tokenizeWords", () => {
  it("yields word offsets without trailing punctuation", () => {
    const tokens = tokenizeWords(CONTEXT);
    expect(tokens.map((t) => t.word)).toEqual([
      "A", "dog", "sitting", "on", "a", "wooden", "bench",
    ]);
    const dog = tokens[1];
    expect(CONTEXT.slice(dog.start, dog.end)).toBe("dog");
    const bench = tokens[6];
    expect(CONTEXT.slice(bench.start, bench.end)).toBe("bench");
  });

  it("handles empty and whitespace-only strings", () => {
    expect(tokenizeWords("")).toEqual([]);
    expect(tokenizeWords("   ")).toEqual([]);
  });
});

describe("spansFromSelection", () => {
  it("merges adjacent selected words into one object span", () => {
    const tokens = tokenizeWords(CONTEXT);
    const spans = spansFromSelection(tokens, new Set([1, 5, 6]));
    expect(spans).toEqual([
      [2, 5],
      [19, 31],
    ]);
    expect(objectWords(CONTEXT, spans)).toEqual(["dog", "wooden bench"]);
  });

  it("keeps non-adjacent selections separate", () => {
    const tokens = tokenizeWords("red car near blue house");
    const spans = spansFromSelection(tokens, new Set([0, 3]));
    expect(objectWords("red car near blue house", spans)).toEqual(["red", "blue"]);
  });

  it("empty selection yields no spans", () => {
    expect(spansFromSelection(tokenizeWords(CONTEXT), new Set())).toEqual([]);
  });
});

describe("toggleWord", () => {
  it("adds and removes without mutating the input", () => {
    const start = new Set([1]);
    const added = toggleWord(start, 2);
    expect([...added].sort()).toEqual([1, 2]);
    expect([...start]).toEqual([1]);
    const removed = toggleWord(added, 1);
    expect([...removed]).toEqual([2]);
  });
});
