/**
 * Run-length encoded masks over point indices, mirroring the server wire
 * format: `{n, runs: [start, length, ...]}` with sorted, non-overlapping runs.
 */

export interface RleMask {
  n: number;
  runs: number[];
}

export function rleDecode(rle: RleMask): Uint8Array {
  if (!Number.isInteger(rle.n) || rle.n < 0 || rle.runs.length % 2 !== 0) {
    throw new Error("malformed RLE payload");
  }
  const mask = new Uint8Array(rle.n);
  let prevEnd = 0;
  for (let i = 0; i < rle.runs.length; i += 2) {
    const start = rle.runs[i];
    const length = rle.runs[i + 1];
    if (length < 1 || start < prevEnd || start + length > rle.n) {
      throw new Error("runs must be sorted, positive, and inside [0, n)");
    }
    mask.fill(1, start, start + length);
    prevEnd = start + length;
  }
  return mask;
}

export function rleEncode(mask: Uint8Array): RleMask {
  const runs: number[] = [];
  let start = -1;
  for (let i = 0; i < mask.length; i++) {
    if (mask[i] && start < 0) {
      start = i;
    } else if (!mask[i] && start >= 0) {
      runs.push(start, i - start);
      start = -1;
    }
  }
  if (start >= 0) {
    runs.push(start, mask.length - start);
  }
  return { n: mask.length, runs };
}

export function maskIndices(mask: Uint8Array): number[] {
  const out: number[] = [];
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) out.push(i);
  }
  return out;
}
