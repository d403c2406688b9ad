// Single-in-flight render scheduling with latest-wins cancellation: a new
// request aborts the previous one, and a superseded request resolves null so
// stale pixels never land in the preview.

export class RenderQueue {
  private controller: AbortController | null = null;
  private version = 0;

  async submit<T>(task: (signal: AbortSignal) => Promise<T>): Promise<T | null> {
    this.version += 1;
    const myVersion = this.version;
    this.controller?.abort();
    const controller = new AbortController();
    this.controller = controller;
    try {
      const result = await task(controller.signal);
      return myVersion === this.version ? result : null;
    } catch (err) {
      if (controller.signal.aborted || myVersion !== this.version) return null;
      throw err;
    }
  }

  get busy(): boolean {
    return this.controller !== null && !this.controller.signal.aborted;
  }
}
