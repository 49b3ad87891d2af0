// Per-phase stopwatch mirroring the study protocol: marking (drawing axes),
// inference (waiting on the model), refinement (reviewing and redoing).
// Phases are mutually exclusive; starting one stops whatever was running.

export type Phase = 'marking' | 'inference' | 'refinement';

export class PhaseStopwatch {
  private totals = new Map<Phase, number>();
  private active: Phase | null = null;
  private startedAt = 0;

  constructor(private now: () => number = () => performance.now()) {}

  get running(): Phase | null {
    return this.active;
  }

  start(phase: Phase): void {
    if (this.active === phase) return;
    this.stop();
    this.active = phase;
    this.startedAt = this.now();
  }

  stop(): void {
    if (this.active === null) return;
    const elapsed = this.now() - this.startedAt;
    this.totals.set(this.active, (this.totals.get(this.active) ?? 0) + elapsed);
    this.active = null;
  }

  /** Total milliseconds spent in a phase, including a still-running one. */
  total(phase: Phase): number {
    const settled = this.totals.get(phase) ?? 0;
    return this.active === phase ? settled + (this.now() - this.startedAt) : settled;
  }

  /** Seconds per phase, matching the server's export units. */
  totalsSeconds(): Record<Phase, number> {
    return {
      marking: this.total('marking') / 1000,
      inference: this.total('inference') / 1000,
      refinement: this.total('refinement') / 1000,
    };
  }
}
