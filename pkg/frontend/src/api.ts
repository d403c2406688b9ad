// Typed client for the colorization service. The transport is injectable so
// tests can record or fake traffic; the UI always goes through this client,
// which is what makes the "editing never trains" network-trace test honest.

export type Transport = (url: string, init?: RequestInit) => Promise<Response>;

export interface JobInfo {
  job_id: string;
  kind: string;
  status: "queued" | "running" | "done" | "failed";
  progress: number;
  step: number;
  total: number;
  result: Record<string, string> | null;
  error: string | null;
}

export interface PromptSetInfo {
  context: string;
  object_spans: [number, number][];
  color_assignments: Record<string, string>;
  suffix: string | null;
  rewritten: string;
  target: string;
}

export interface SessionManifest {
  session_id: string;
  status: string;
  prompt_set: PromptSetInfo;
  recon_seed: number;
  sample_steps: number;
}

export interface Variant {
  eta: number;
  seed: number;
  url: string;
}

export interface TrainingEvent {
  step?: number;
  ldm?: number;
  cst?: number;
  combined?: number;
  phase?: string;
  event?: string;
  status?: string;
  error?: string | null;
}

export const DEFAULT_NEGATIVE_PROMPTS = [
  "A grayscale photograph.",
  "A picture with scratches.",
];

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
  }
}

async function raiseForStatus(resp: Response): Promise<Response> {
  if (resp.ok) return resp;
  let detail = `${resp.status}`;
  try {
    const body = await resp.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  constructor(
    readonly base: string,
    private transport: Transport = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return this.base.replace(/\/$/, "") + path;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await raiseForStatus(await this.transport(this.url(path), init));
    return (await resp.json()) as T;
  }

  async submitStage1(
    gray: Blob,
    prompt: string,
    negatives?: string[],
    config?: Record<string, unknown>,
  ): Promise<{ job_id: string }> {
    const form = new FormData();
    form.append("gray", gray, "gray.png");
    form.append("prompt", prompt);
    if (negatives) form.append("negatives", JSON.stringify(negatives));
    if (config) form.append("config", JSON.stringify(config));
    return this.json("/api/jobs/stage1", { method: "POST", body: form });
  }

  async submitSession(
    imageRef: string,
    grayRef: string,
    prompt: string,
    objectSpans: [number, number][],
    config?: Record<string, unknown>,
  ): Promise<{ job_id: string; session_id: string }> {
    return this.json("/api/jobs/session", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        image_ref: imageRef,
        gray_ref: grayRef,
        prompt,
        object_spans: objectSpans,
        config,
      }),
    });
  }

  getJob(jobId: string): Promise<JobInfo> {
    return this.json(`/api/jobs/${jobId}`);
  }

  async waitForJob(
    jobId: string,
    opts: { pollMs?: number; onUpdate?: (job: JobInfo) => void } = {},
  ): Promise<JobInfo> {
    const pollMs = opts.pollMs ?? 300;
    for (;;) {
      const job = await this.getJob(jobId);
      opts.onUpdate?.(job);
      if (job.status === "done") return job;
      if (job.status === "failed") throw new ApiError(500, job.error ?? "job failed");
      await new Promise((r) => setTimeout(r, pollMs));
    }
  }

  // Server-sent progress events, parsed off a streaming fetch so the same
  // code path works in the browser and under node tests.
  async followJobEvents(
    jobId: string,
    onEvent: (event: TrainingEvent) => void,
    signal?: AbortSignal,
  ): Promise<void> {
    const resp = await raiseForStatus(
      await this.transport(this.url(`/api/jobs/${jobId}/events`), { signal }),
    );
    if (!resp.body) return;
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      let sep;
      while ((sep = buffer.indexOf("\n\n")) >= 0) {
        const frame = buffer.slice(0, sep);
        buffer = buffer.slice(sep + 2);
        for (const line of frame.split("\n")) {
          if (line.startsWith("data: ")) onEvent(JSON.parse(line.slice(6)));
        }
      }
    }
  }

  getSession(sessionId: string): Promise<SessionManifest> {
    return this.json(`/api/sessions/${sessionId}`);
  }

  async render(
    sessionId: string,
    params: {
      eta: number;
      seed?: number;
      colorAssignments?: Record<string, string>;
      suffix?: string;
    },
    signal?: AbortSignal,
  ): Promise<Blob> {
    const resp = await raiseForStatus(
      await this.transport(this.url(`/api/sessions/${sessionId}/render`), {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({
          eta: params.eta,
          seed: params.seed,
          color_assignments: params.colorAssignments,
          suffix: params.suffix,
        }),
        signal,
      }),
    );
    return resp.blob();
  }

  async variants(
    sessionId: string,
    params: { count?: number; colorAssignments?: Record<string, string> } = {},
  ): Promise<Variant[]> {
    const body = await this.json<{ variants: Variant[] }>(
      `/api/sessions/${sessionId}/variants`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({
          count: params.count ?? 8,
          color_assignments: params.colorAssignments,
        }),
      },
    );
    return body.variants;
  }

  // The server is the single source of truth for prompt rewriting; the UI
  // previews exclusively through this echo endpoint.
  rewritePreview(
    context: string,
    objectSpans: [number, number][],
    colorAssignments?: Record<string, string>,
    suffix?: string,
  ): Promise<{ rewritten: string; target: string }> {
    return this.json("/api/prompts/rewrite", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        context,
        object_spans: objectSpans,
        color_assignments: colorAssignments,
        suffix,
      }),
    });
  }

  artifactUrl(ref: string): string {
    return this.url(`/api/artifacts/${ref}`);
  }

  async fetchArtifact(ref: string): Promise<Blob> {
    const resp = await raiseForStatus(await this.transport(this.artifactUrl(ref)));
    return resp.blob();
  }
}
