import {
  ApiError,
  CompletionResponse,
  ModelInfo,
  fetchModels,
  requestCompletion,
} from "./api.js";
import {
  CanvasStrokeBuffer,
  Point,
  Triple,
  cumulativePoints,
  resampled,
  toTriples,
  triplesToPolylines,
  validTriples,
} from "./strokes.js";

export interface CompletionOverlay {
  /** The triples the user sent (after resampling). */
  prefix: Triple[];
  /** Everything the model appended beyond the prefix. */
  continuation: Triple[];
  skeScore: number;
}

/**
 * Split a completion response against the prefix that produced it. The
 * service echoes the prefix verbatim at the start of the result, so the
 * continuation is simply the tail; a response that does not extend or
 * match the prefix is rejected.
 */
export function splitCompletion(prefix: Triple[], response: CompletionResponse): CompletionOverlay {
  if (!validTriples(response.strokes)) {
    throw new Error("service returned malformed strokes");
  }
  const strokes = response.strokes;
  if (strokes.length < prefix.length) {
    throw new Error("completion is shorter than the prefix");
  }
  for (let i = 0; i < prefix.length; i++) {
    const [dx, dy] = prefix[i];
    if (Math.abs(strokes[i][0] - dx) > 1e-3 || Math.abs(strokes[i][1] - dy) > 1e-3) {
      throw new Error("completion does not preserve the prefix");
    }
  }
  return {
    prefix,
    continuation: strokes.slice(prefix.length),
    skeScore: response.ske_score,
  };
}

type Status = "idle" | "pending" | "done" | "error";

/**
 * The sketchpad state machine, DOM-free for testability: stroke capture,
 * request lifecycle with cancellation, and overlay bookkeeping. The DOM
 * layer (main.ts) subscribes to onChange and redraws.
 */
export class SketchPad {
  buffer = new CanvasStrokeBuffer();
  tau = 0.25;
  models: ModelInfo[] = [];
  selected: ModelInfo | null = null;
  overlay: CompletionOverlay | null = null;
  status: Status = "idle";
  errorMessage = "";
  onChange: () => void = () => {};

  private drawing = false;
  private pending: AbortController | null = null;
  private lastPrefix: Triple[] | null = null;
  private api: typeof requestCompletion;

  constructor(api: typeof requestCompletion = requestCompletion) {
    this.api = api;
  }

  async loadModels(fetcher: typeof fetchModels = fetchModels): Promise<void> {
    this.models = (await fetcher()).filter((m) => m.supports_completion);
    this.selected = this.models[0] ?? null;
    this.onChange();
  }

  selectModel(name: string): void {
    this.selected = this.models.find((m) => m.name === name) ?? this.selected;
  }

  pointerDown(p: Point): void {
    this.drawing = true;
    this.buffer.beginStroke(p);
    this.onChange();
  }

  pointerMove(p: Point): void {
    if (!this.drawing) return;
    this.buffer.extend(p);
    this.onChange();
  }

  pointerUp(): void {
    if (!this.drawing) return;
    this.drawing = false;
    this.buffer.endStroke();
    this.onChange();
  }

  clear(): void {
    this.cancelPending();
    this.buffer.clear();
    this.overlay = null;
    this.status = "idle";
    this.errorMessage = "";
    this.onChange();
  }

  /** Triples to send: capped to half the model's sequence budget. */
  prefixTriples(): Triple[] {
    const nMax = this.selected?.n_max ?? 64;
    return toTriples(resampled(this.buffer, Math.max(2, Math.floor(nMax / 2))));
  }

  async complete(): Promise<void> {
    if (this.buffer.isEmpty() || !this.selected) return;
    await this.send(this.prefixTriples());
  }

  /** Resample a new completion for the same prefix as the last request. */
  async regenerate(): Promise<void> {
    if (!this.lastPrefix) return this.complete();
    await this.send(this.lastPrefix);
  }

  private cancelPending(): void {
    if (this.pending) {
      this.pending.abort();
      this.pending = null;
    }
  }

  private async send(prefix: Triple[]): Promise<void> {
    if (!this.selected || prefix.length === 0) return;
    this.cancelPending();
    const controller = new AbortController();
    this.pending = controller;
    this.status = "pending";
    this.errorMessage = "";
    this.onChange();
    try {
      const response = await this.api(
        { model: this.selected.name, tau: this.tau, strokes: prefix },
        controller.signal,
      );
      if (controller.signal.aborted) return;
      this.overlay = splitCompletion(prefix, response);
      this.lastPrefix = prefix;
      this.status = "done";
    } catch (err) {
      if (controller.signal.aborted) return; // superseded request; keep drawing
      this.status = "error";
      this.errorMessage = err instanceof ApiError ? err.message : `request failed: ${err}`;
    } finally {
      if (this.pending === controller) this.pending = null;
      this.onChange();
    }
  }

  /** Continuation polylines in canvas coordinates, for the overlay pass. */
  overlayPolylines(): Point[][] {
    if (!this.overlay) return [];
    const anchor = this.buffer.anchor();
    const prefixPoints = cumulativePoints(this.overlay.prefix, anchor);
    const joint = prefixPoints[prefixPoints.length - 1];
    const lastPen = this.overlay.prefix[this.overlay.prefix.length - 1]?.[2] ?? 0;
    // When the pen is still down at the joint, the first continuation
    // segment connects to the user's last point.
    return triplesToPolylines(this.overlay.continuation, joint, lastPen === 0);
  }
}
