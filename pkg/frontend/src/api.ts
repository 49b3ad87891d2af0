// Typed client for the segmentation service. All routes live under /api.

import { RleMask, rleFromJson } from './rle';

export interface SessionCreated {
  id: string;
  slices: number;
  height: number;
  width: number;
}

export interface SessionInfo extends SessionCreated {
  markers: number[];
  segmented: number[];
  refined: number[];
  timing: { marking: number; inference: number; refinement: number };
  total_time: number;
  checkpoint: string;
}

export interface SegmentResult {
  mask: RleMask;
  confidence: number;
  inference_ms: number;
  cache_hit: boolean;
}

export interface MarkerPayload {
  slice: number;
  long_axis: [[number, number], [number, number]];
  short_axis: [[number, number], [number, number]];
}

export interface AssistResult {
  slices: number[];
  inference_ms: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<never> {
  let message = `${response.status}`;
  try {
    const body = await response.json();
    const detail = body?.detail;
    message = typeof detail === 'object' && detail?.message ? detail.message : JSON.stringify(detail ?? body);
  } catch {
    // non-JSON error body, keep the status text
  }
  throw new ApiError(response.status, message);
}

export class ServiceClient {
  // later drags replace earlier in-flight segment calls on the same slice
  private inFlight = new Map<number, AbortController>();

  constructor(
    private base = '',
    private fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchFn(`${this.base}${path}`, init);
    if (!response.ok) await parseError(response);
    return response;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    return (await this.request(path, init)).json() as Promise<T>;
  }

  createSyntheticSession(depth: number, seed: number): Promise<SessionCreated> {
    return this.json('/api/sessions', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ synth: { depth, seed } }),
    });
  }

  getSession(id: string): Promise<SessionInfo> {
    return this.json(`/api/sessions/${id}`);
  }

  sliceUrl(id: string, k: number): string {
    return `${this.base}/api/sessions/${id}/slices/${k}`;
  }

  /**
   * Segment one slice with a box prompt. Aborts any request still in
   * flight for the same slice; the aborted caller sees an AbortError.
   */
  async segment(
    id: string,
    slice: number,
    box: [number, number, number, number],
  ): Promise<SegmentResult> {
    this.inFlight.get(slice)?.abort();
    const controller = new AbortController();
    this.inFlight.set(slice, controller);
    try {
      const raw = await this.json<Record<string, unknown>>(`/api/sessions/${id}/segment`, {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({ slice, box }),
        signal: controller.signal,
      });
      return {
        mask: rleFromJson(raw.mask),
        confidence: raw.confidence as number,
        inference_ms: raw.inference_ms as number,
        cache_hit: raw.cache_hit as boolean,
      };
    } finally {
      if (this.inFlight.get(slice) === controller) this.inFlight.delete(slice);
    }
  }

  submitMarkers(id: string, markers: MarkerPayload[]): Promise<{ count: number; slices: number[] }> {
    return this.json(`/api/sessions/${id}/markers`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ markers }),
    });
  }

  runAssist(id: string): Promise<AssistResult> {
    return this.json(`/api/sessions/${id}/assist`, { method: 'POST' });
  }

  async getMask(id: string, k: number): Promise<{ mask: RleMask; refined: boolean }> {
    const raw = await this.json<Record<string, unknown>>(`/api/sessions/${id}/masks/${k}`);
    return { mask: rleFromJson(raw.mask), refined: raw.refined as boolean };
  }

  putRefinedMask(
    id: string,
    k: number,
    mask: RleMask,
    durationSeconds: number,
  ): Promise<{ slice: number; refined: boolean }> {
    return this.json(`/api/sessions/${id}/masks/${k}`, {
      method: 'PUT',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ mask, duration: durationSeconds }),
    });
  }

  exportUrl(id: string): string {
    return `${this.base}/api/sessions/${id}/export`;
  }
}
