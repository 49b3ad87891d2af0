// Run-length mask coding, wire-compatible with the service.
//
// Convention: counts alternate zero-run, one-run, zero-run, ... starting
// with the zeros (first count may be 0 when the mask starts with a 1).
// The trailing zero run is kept only when the encoder emitted it; an
// all-zero mask is the single count [h*w].

export interface RleMask {
  dims: [number, number]; // [height, width]
  counts: number[];
}

export class RleError extends Error {}

function checkDims(dims: number[]): [number, number] {
  if (dims.length !== 2 || !dims.every((d) => Number.isInteger(d) && d > 0)) {
    throw new RleError(`dims must be two positive integers, got ${JSON.stringify(dims)}`);
  }
  return [dims[0], dims[1]];
}

/** Parse the service's JSON form, validating shape and counts. */
export function rleFromJson(payload: unknown): RleMask {
  if (typeof payload !== 'object' || payload === null) {
    throw new RleError('RLE payload must be an object');
  }
  const obj = payload as Record<string, unknown>;
  if (!Array.isArray(obj.dims) || !Array.isArray(obj.counts)) {
    throw new RleError("RLE payload needs 'dims' and 'counts' arrays");
  }
  const dims = checkDims(obj.dims as number[]);
  const counts = (obj.counts as unknown[]).map((c) => {
    if (typeof c !== 'number' || !Number.isInteger(c) || c < 0) {
      throw new RleError(`counts must be non-negative integers, got ${c}`);
    }
    return c;
  });
  return { dims, counts };
}

/** Flat row-major 0/1 pixels for an RLE mask. */
export function decodeRle(rle: RleMask): Uint8Array {
  const [h, w] = checkDims(rle.dims);
  const total = h * w;
  const out = new Uint8Array(total);
  let offset = 0;
  let value = 0;
  for (const count of rle.counts) {
    if (!Number.isInteger(count) || count < 0) {
      throw new RleError(`run counts must be non-negative integers, got ${count}`);
    }
    if (offset + count > total) {
      throw new RleError(`runs cover ${offset + count} pixels, mask has ${total}`);
    }
    if (value === 1) out.fill(1, offset, offset + count);
    offset += count;
    value ^= 1;
  }
  if (offset !== total) {
    throw new RleError(`runs cover ${offset} pixels, mask has ${total}`);
  }
  return out;
}

/** Encode flat row-major 0/1 pixels; inverse of decodeRle. */
export function encodeRle(pixels: Uint8Array, height: number, width: number): RleMask {
  const total = height * width;
  if (pixels.length !== total) {
    throw new RleError(`expected ${total} pixels for ${height}x${width}, got ${pixels.length}`);
  }
  const counts: number[] = [];
  let value = 0;
  let run = 0;
  for (let i = 0; i < total; i++) {
    const pixel = pixels[i] ? 1 : 0;
    if (pixel === value) {
      run += 1;
    } else {
      counts.push(run);
      value = pixel;
      run = 1;
    }
  }
  counts.push(run);
  return { dims: [height, width], counts };
}

export function masksEqual(a: RleMask, b: RleMask): boolean {
  return (
    a.dims[0] === b.dims[0] &&
    a.dims[1] === b.dims[1] &&
    a.counts.length === b.counts.length &&
    a.counts.every((c, i) => c === b.counts[i])
  );
}
