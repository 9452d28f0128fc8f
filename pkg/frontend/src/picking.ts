/**
 * Pure screen-space picking math, separated from three.js so it can be unit
 * tested: project points through a column-major view-projection matrix and
 * find the nearest one to the cursor within a pixel radius.
 *
 * Level-of-detail decimation is display-only; picking always reports
 * full-resolution point indices.
 */

export interface ScreenPoint {
  x: number;
  y: number;
  depth: number;
}

/** Project a world point; null when behind the camera. */
export function projectToScreen(
  point: [number, number, number],
  viewProj: Float32Array | number[],
  width: number,
  height: number,
): ScreenPoint | null {
  const [x, y, z] = point;
  const m = viewProj;
  const cx = m[0] * x + m[4] * y + m[8] * z + m[12];
  const cy = m[1] * x + m[5] * y + m[9] * z + m[13];
  const cz = m[2] * x + m[6] * y + m[10] * z + m[14];
  const cw = m[3] * x + m[7] * y + m[11] * z + m[15];
  if (cw <= 0) {
    return null;
  }
  const ndcX = cx / cw;
  const ndcY = cy / cw;
  return {
    x: (ndcX * 0.5 + 0.5) * width,
    y: (1 - (ndcY * 0.5 + 0.5)) * height,
    depth: cz / cw,
  };
}

/**
 * Nearest rendered point under the cursor within `radiusPx`; ties broken by
 * depth (closer wins), then by lower index. Returns the full-resolution
 * point index, or null when nothing is in range.
 */
export function pickPoint(
  positions: Float32Array,
  displayed: Uint32Array | null,
  viewProj: Float32Array | number[],
  width: number,
  height: number,
  cursorX: number,
  cursorY: number,
  radiusPx: number,
): number | null {
  const count = displayed ? displayed.length : positions.length / 3;
  let best: number | null = null;
  let bestDist = radiusPx * radiusPx;
  let bestDepth = Infinity;
  for (let j = 0; j < count; j++) {
    const index = displayed ? displayed[j] : j;
    const screen = projectToScreen(
      [positions[3 * index], positions[3 * index + 1], positions[3 * index + 2]],
      viewProj, width, height,
    );
    if (!screen) continue;
    const dx = screen.x - cursorX;
    const dy = screen.y - cursorY;
    const d2 = dx * dx + dy * dy;
    if (d2 < bestDist || (d2 === bestDist && screen.depth < bestDepth)) {
      best = index;
      bestDist = d2;
      bestDepth = screen.depth;
    }
  }
  return best;
}

export const LOD_THRESHOLD = 500_000;

/**
 * Indices to actually render. Returns null (render everything) up to the
 * threshold; above it, a uniform stride subset capped at the threshold.
 */
export function lodIndices(nPoints: number,
                           threshold: number = LOD_THRESHOLD): Uint32Array | null {
  if (nPoints <= threshold) {
    return null;
  }
  const stride = Math.ceil(nPoints / threshold);
  const out = new Uint32Array(Math.ceil(nPoints / stride));
  for (let i = 0, j = 0; i < nPoints; i += stride, j++) {
    out[j] = i;
  }
  return out;
}
