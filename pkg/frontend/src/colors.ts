/** Stable per-object colors: the same object id always renders the same hue
 * within a session, regardless of creation order. */

export type Rgb = [number, number, number];

export function colorForObject(objectId: number): Rgb {
  // integer hash -> golden-ratio hue spacing
  let h = (objectId + 1) * 2654435761;
  h = (h ^ (h >>> 16)) >>> 0;
  const hue = (h % 360) / 360;
  return hslToRgb(hue, 0.75, 0.55);
}

export function hslToRgb(h: number, s: number, l: number): Rgb {
  const q = l < 0.5 ? l * (1 + s) : l + s - l * s;
  const p = 2 * l - q;
  const channel = (t: number): number => {
    t = ((t % 1) + 1) % 1;
    if (t < 1 / 6) return p + (q - p) * 6 * t;
    if (t < 1 / 2) return q;
    if (t < 2 / 3) return p + (q - p) * (2 / 3 - t) * 6;
    return p;
  };
  return [channel(h + 1 / 3), channel(h), channel(h - 1 / 3)];
}
