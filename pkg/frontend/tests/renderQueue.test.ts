import { describe, expect, it } from "vitest";

import { RenderQueue } from "../src/renderQueue.js";

function deferred<T>() {
  let resolve!: (v: T) => void;
  let reject!: (e: unknown) => void;
  const promise = new Promise<T>((res, rej) => {
    resolve = res;
    reject = rej;
  });
  return { promise, resolve, reject };
}

describe("RenderQueue", () => {
  it("latest submit wins; superseded requests resolve null", async () => {
    const queue = new RenderQueue();
    const slow = deferred<string>();
    const aborted: boolean[] = [];

    const first = queue.submit(async (signal) => {
      signal.addEventListener("abort", () => aborted.push(true));
      return slow.promise;
    });
    const second = queue.submit(async () => "fresh");

    expect(await second).toBe("fresh");
    slow.resolve("stale");
    expect(await first).toBeNull();
    expect(aborted).toEqual([true]);
  });

  it("abort errors from superseded tasks are swallowed", async () => {
    const queue = new RenderQueue();
    const first = queue.submit(
      (signal) =>
        new Promise<string>((_, reject) => {
          signal.addEventListener("abort", () => reject(new Error("aborted")));
        }),
    );
    const second = queue.submit(async () => "ok");
    expect(await second).toBe("ok");
    expect(await first).toBeNull();
  });

  it("errors from the active task propagate", async () => {
    const queue = new RenderQueue();
    await expect(
      queue.submit(async () => {
        throw new Error("boom");
      }),
    ).rejects.toThrow("boom");
  });

  it("sequential submits all resolve", async () => {
    const queue = new RenderQueue();
    expect(await queue.submit(async () => 1)).toBe(1);
    expect(await queue.submit(async () => 2)).toBe(2);
  });
});
