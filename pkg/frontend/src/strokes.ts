/**
 * Stroke capture and conversion between absolute canvas points and the
 * service's offset-triple wire format [dx, dy, p] (p = 1: pen lifted
 * after the point).
 *
 * Conversion is anchored at the first captured sample: cumulatively
 * summing the emitted triples from that anchor reproduces every later
 * sample exactly.
 */

export type Triple = [number, number, 0 | 1];

export interface Point {
  x: number;
  y: number;
}

export class CanvasStrokeBuffer {
  strokes: Point[][] = [];
  private active: Point[] | null = null;

  beginStroke(p: Point): void {
    this.active = [p];
    this.strokes.push(this.active);
  }

  /** Appends a drag sample; consecutive duplicates are dropped so the
   * triple conversion never emits a zero-length segment. */
  extend(p: Point): void {
    if (!this.active) return;
    const last = this.active[this.active.length - 1];
    if (last.x === p.x && last.y === p.y) return;
    this.active.push(p);
  }

  endStroke(): void {
    if (this.active && this.active.length === 0) this.strokes.pop();
    this.active = null;
  }

  clear(): void {
    this.strokes = [];
    this.active = null;
  }

  isEmpty(): boolean {
    return !this.strokes.some((s) => s.length > 0);
  }

  pointCount(): number {
    return this.strokes.reduce((n, s) => n + s.length, 0);
  }

  anchor(): Point {
    const first = this.strokes.find((s) => s.length > 0);
    return first ? { ...first[0] } : { x: 0, y: 0 };
  }
}

/**
 * Flatten the buffer into offset triples. The anchor point itself emits
 * no triple (the drawing starts there); the last point of every stroke
 * carries p = 1.
 */
export function toTriples(buffer: CanvasStrokeBuffer): Triple[] {
  const triples: Triple[] = [];
  let prev: Point | null = null;
  for (const stroke of buffer.strokes) {
    if (stroke.length === 0) continue;
    for (const point of stroke) {
      if (prev !== null) {
        if (point.x === prev.x && point.y === prev.y) continue;
        triples.push([point.x - prev.x, point.y - prev.y, 0]);
      }
      prev = point;
    }
    if (triples.length > 0) triples[triples.length - 1][2] = 1;
  }
  return triples;
}

/** Inverse of toTriples: absolute points, starting at (and including)
 * the anchor. */
export function cumulativePoints(triples: Triple[], anchor: Point): Point[] {
  const points: Point[] = [{ ...anchor }];
  let { x, y } = anchor;
  for (const [dx, dy] of triples) {
    x += dx;
    y += dy;
    points.push({ x, y });
  }
  return points;
}

/** Split cumulated positions into drawn polylines: the pen starts down
 * at the anchor (unless told otherwise) and a p = 1 triple lifts it
 * after its point. */
export function triplesToPolylines(
  triples: Triple[],
  anchor: Point,
  penDownAtStart = true,
): Point[][] {
  const polylines: Point[][] = [];
  let current: Point[] = [{ ...anchor }];
  let { x, y } = anchor;
  let penDown = penDownAtStart;
  for (const [dx, dy, p] of triples) {
    x += dx;
    y += dy;
    if (penDown) {
      current.push({ x, y });
    } else {
      current = [{ x, y }];
    }
    if (p === 1) {
      if (current.length >= 2) polylines.push(current);
      penDown = false;
    } else {
      penDown = true;
    }
  }
  if (penDown && current.length >= 2) polylines.push(current);
  return polylines;
}

/**
 * Cap the buffer at maxPoints samples by uniform per-stroke subsampling
 * (stroke endpoints are always kept), leaving the rest of the model's
 * sequence budget for the completion.
 */
export function resampled(buffer: CanvasStrokeBuffer, maxPoints: number): CanvasStrokeBuffer {
  const total = buffer.pointCount();
  const out = new CanvasStrokeBuffer();
  if (total <= maxPoints) {
    out.strokes = buffer.strokes.map((s) => s.map((p) => ({ ...p })));
    return out;
  }
  const keepRatio = maxPoints / total;
  for (const stroke of buffer.strokes) {
    if (stroke.length === 0) continue;
    const budget = Math.max(2, Math.round(stroke.length * keepRatio));
    const kept: Point[] = [];
    for (let i = 0; i < budget; i++) {
      const idx = Math.round((i * (stroke.length - 1)) / Math.max(1, budget - 1));
      const candidate = stroke[idx];
      const last = kept[kept.length - 1];
      if (!last || last.x !== candidate.x || last.y !== candidate.y) {
        kept.push({ ...candidate });
      }
    }
    out.strokes.push(kept);
  }
  return out;
}

/** Client-side check that a wire payload is well-formed stroke-3. */
export function validTriples(value: unknown): value is Triple[] {
  if (!Array.isArray(value)) return false;
  return value.every(
    (t) =>
      Array.isArray(t) &&
      t.length === 3 &&
      Number.isFinite(t[0]) &&
      Number.isFinite(t[1]) &&
      (t[2] === 0 || t[2] === 1),
  );
}
