// Headless studio state machine. Everything the views do funnels through
// this controller, so the invariants (editing never posts jobs, previews
// come from the server echo) are testable without a browser.

import {
  ApiClient,
  DEFAULT_NEGATIVE_PROMPTS,
  JobInfo,
  SessionManifest,
  TrainingEvent,
  Variant,
} from "./api.js";
import { RenderQueue } from "./renderQueue.js";
import { spansFromSelection, tokenizeWords, WordToken } from "./spans.js";

export type Phase = "upload" | "training" | "tagging" | "building" | "editing";

// eta stop 0 shows the stored reconstruction; the editing range proper is
// [0.7, 0.975] in 0.025 steps, matching the default variant grid
export const ETA_STOPS: number[] = [
  0,
  ...Array.from({ length: 12 }, (_, i) => Math.round((0.7 + 0.025 * i) * 1000) / 1000),
];

export const COLOR_WORDS = [
  "red", "orange", "yellow", "green", "teal", "blue",
  "purple", "pink", "brown", "white", "gray", "black",
];

export interface LossPoint {
  step: number;
  ldm: number;
  cst: number;
  combined: number;
}

export class StudioController {
  phase: Phase = "upload";
  prompt = "";
  negatives: string[] = [...DEFAULT_NEGATIVE_PROMPTS];
  lossPoints: LossPoint[] = [];
  jobProgress = 0;

  grayRef: string | null = null;
  primaryRef: string | null = null;
  alignedRef: string | null = null;

  tokens: WordToken[] = [];
  selectedWords = new Set<number>();
  rewrittenPreview = "";

  sessionId: string | null = null;
  manifest: SessionManifest | null = null;
  buildResult: JobInfo | null = null;
  assignments: Record<string, string> = {};
  etaIndex = ETA_STOPS.length - 4; // 0.9 by default, inside [0.7, 1)

  private queue = new RenderQueue();

  constructor(private api: ApiClient) {}

  get eta(): number {
    return ETA_STOPS[this.etaIndex];
  }

  get objectSpans(): [number, number][] {
    return spansFromSelection(this.tokens, this.selectedWords);
  }

  get objectWords(): string[] {
    return this.objectSpans.map(([s, e]) => this.prompt.slice(s, e));
  }

  addNegative(prompt: string): void {
    const trimmed = prompt.trim();
    if (trimmed && !this.negatives.includes(trimmed)) this.negatives.push(trimmed);
  }

  removeNegative(prompt: string): void {
    this.negatives = this.negatives.filter((n) => n !== prompt);
  }

  // -- stage 1 -----------------------------------------------------------------

  async startColorize(
    gray: Blob,
    prompt: string,
    config?: Record<string, unknown>,
    onEvent?: (event: TrainingEvent) => void,
  ): Promise<JobInfo> {
    this.prompt = prompt;
    this.phase = "training";
    this.lossPoints = [];
    const { job_id } = await this.api.submitStage1(gray, prompt, this.negatives, config);
    const follow = this.api
      .followJobEvents(job_id, (event) => {
        if (typeof event.step === "number" && typeof event.combined === "number") {
          this.lossPoints.push(event as LossPoint);
        }
        onEvent?.(event);
      })
      .catch(() => undefined); // the poll below is authoritative
    const job = await this.api.waitForJob(job_id, {
      onUpdate: (j) => (this.jobProgress = j.progress),
    });
    await follow;
    this.grayRef = job.result!.gray_ref;
    this.primaryRef = job.result!.primary_ref;
    this.alignedRef = job.result!.aligned_ref;
    this.tokens = tokenizeWords(prompt);
    this.selectedWords = new Set();
    this.phase = "tagging";
    return job;
  }

  // -- object tagging ------------------------------------------------------------

  toggleWord(index: number): void {
    if (this.selectedWords.has(index)) this.selectedWords.delete(index);
    else this.selectedWords.add(index);
  }

  /** Preview the rewritten prompt exactly as the server will produce it. */
  async refreshPreview(): Promise<string> {
    const { rewritten } = await this.api.rewritePreview(this.prompt, this.objectSpans);
    this.rewrittenPreview = rewritten;
    return rewritten;
  }

  // -- stage 2 build ------------------------------------------------------------

  async buildSession(config?: Record<string, unknown>): Promise<SessionManifest> {
    if (!this.alignedRef || !this.grayRef) throw new Error("no colorized image yet");
    this.phase = "building";
    const { job_id, session_id } = await this.api.submitSession(
      this.alignedRef,
      this.grayRef,
      this.prompt,
      this.objectSpans,
      config,
    );
    this.sessionId = session_id;
    this.buildResult = await this.api.waitForJob(job_id, {
      onUpdate: (j) => (this.jobProgress = j.progress),
    });
    this.manifest = await this.api.getSession(session_id);
    this.assignments = {};
    this.phase = "editing";
    return this.manifest;
  }

  // -- edit view -------------------------------------------------------------------

  setColor(objectWord: string, color: string | null): void {
    if (color) this.assignments[objectWord] = color;
    else delete this.assignments[objectWord];
  }

  /** Fired on every slider release / color change; latest request wins. */
  renderCurrent(): Promise<Blob | null> {
    const session = this.requireSession();
    return this.queue.submit((signal) =>
      this.api.render(
        session.session_id,
        {
          eta: this.eta,
          seed: session.recon_seed,
          colorAssignments: this.assignments,
        },
        signal,
      ),
    );
  }

  async makeVariants(count = 8): Promise<Variant[]> {
    const session = this.requireSession();
    const variants = await this.api.variants(session.session_id, {
      count,
      colorAssignments: this.assignments,
    });
    return variants;
  }

  reconstructionRender(): Promise<Blob> {
    const session = this.requireSession();
    return this.api.render(session.session_id, {
      eta: 0,
      seed: session.recon_seed,
    });
  }

  private requireSession(): SessionManifest {
    if (!this.manifest) throw new Error("session not ready");
    return this.manifest;
  }
}
