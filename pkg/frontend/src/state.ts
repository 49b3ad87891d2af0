// Canvas interaction state: draw modes, pending geometry, and the rules for
// turning pointer gestures into segment calls or axis markers. Pure logic,
// no DOM; the shell owns rendering and networking.

export type DrawMode = 'box' | 'long-axis' | 'short-axis' | 'review';

export interface Line {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface PendingGeometry extends Line {
  mode: DrawMode;
}

export interface ControllerEvents {
  /** A completed, non-degenerate box drag, already clamped and integer. */
  onBox(slice: number, box: [number, number, number, number]): void;
  /** Long and short axes both drawn on one slice. */
  onMarker(slice: number, longAxis: Line, shortAxis: Line): void;
  /** Pending geometry changed (or cleared); the shell should repaint. */
  onPendingChange(pending: PendingGeometry | null): void;
  /** Mode changed (axis flows auto-advance). */
  onModeChange(mode: DrawMode): void;
}

const MIN_DRAG_PX = 3; // anything smaller is a slip, not a prompt

function length(line: Line): number {
  return Math.hypot(line.x1 - line.x0, line.y1 - line.y0);
}

export class CanvasController {
  mode: DrawMode = 'box';
  slice = 0;
  pending: PendingGeometry | null = null;
  /** Long axis waiting for its short-axis partner, per slice. */
  readonly longAxisDraft = new Map<number, Line>();

  constructor(
    readonly width: number,
    readonly height: number,
    private events: ControllerEvents,
  ) {}

  private clampX(x: number): number {
    return Math.min(Math.max(x, 0), this.width - 1);
  }

  private clampY(y: number): number {
    return Math.min(Math.max(y, 0), this.height - 1);
  }

  setMode(mode: DrawMode): void {
    if (mode === this.mode) return;
    this.mode = mode;
    this.cancelPending();
    this.events.onModeChange(mode);
  }

  setSlice(slice: number): void {
    this.slice = slice;
    this.cancelPending();
  }

  /** ESC: drop whatever is mid-drag. */
  cancelPending(): void {
    if (this.pending !== null) {
      this.pending = null;
      this.events.onPendingChange(null);
    }
  }

  pointerDown(x: number, y: number): void {
    if (this.mode === 'review') return;
    const px = this.clampX(x);
    const py = this.clampY(y);
    this.pending = { mode: this.mode, x0: px, y0: py, x1: px, y1: py };
    this.events.onPendingChange(this.pending);
  }

  pointerMove(x: number, y: number): void {
    if (this.pending === null) return;
    this.pending.x1 = this.clampX(x);
    this.pending.y1 = this.clampY(y);
    this.events.onPendingChange(this.pending);
  }

  pointerUp(x: number, y: number): void {
    if (this.pending === null) return;
    this.pointerMove(x, y);
    const done = this.pending;
    this.pending = null;
    this.events.onPendingChange(null);
    if (length(done) < MIN_DRAG_PX) return; // degenerate drag, ignore

    if (done.mode === 'box') {
      const x0 = Math.round(Math.min(done.x0, done.x1));
      const y0 = Math.round(Math.min(done.y0, done.y1));
      const x1 = Math.round(Math.max(done.x0, done.x1));
      const y1 = Math.round(Math.max(done.y0, done.y1));
      if (x1 <= x0 || y1 <= y0) return; // zero-area after rounding
      this.events.onBox(this.slice, [x0, y0, x1, y1]);
    } else if (done.mode === 'long-axis') {
      this.longAxisDraft.set(this.slice, { x0: done.x0, y0: done.y0, x1: done.x1, y1: done.y1 });
      this.setMode('short-axis');
    } else if (done.mode === 'short-axis') {
      const long = this.longAxisDraft.get(this.slice);
      if (long === undefined) {
        // short axis without a long one: treat it as starting over
        this.setMode('long-axis');
        return;
      }
      this.longAxisDraft.delete(this.slice);
      this.events.onMarker(this.slice, long, {
        x0: done.x0,
        y0: done.y0,
        x1: done.x1,
        y1: done.y1,
      });
      this.setMode('long-axis');
    }
  }
}
