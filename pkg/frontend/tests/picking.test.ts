import { describe, expect, it } from "vitest";

import { LOD_THRESHOLD, lodIndices, pickPoint, projectToScreen } from "../src/picking.js";

// Orthographic-style identity clip transform: x,y in [-1,1] map across the
// viewport, w = 1.
const IDENTITY = new Float32Array([
  1, 0, 0, 0,
  0, 1, 0, 0,
  0, 0, 1, 0,
  0, 0, 0, 1,
]);

describe("projectToScreen", () => {
  it("maps NDC corners to pixels", () => {
    const center = projectToScreen([0, 0, 0], IDENTITY, 200, 100)!;
    expect(center.x).toBe(100);
    expect(center.y).toBe(50);
    const topLeft = projectToScreen([-1, 1, 0], IDENTITY, 200, 100)!;
    expect(topLeft.x).toBe(0);
    expect(topLeft.y).toBe(0);
  });

  it("rejects points behind the camera", () => {
    const behind = new Float32Array(IDENTITY);
    behind[15] = -1; // w becomes negative
    expect(projectToScreen([0, 0, 0], behind, 100, 100)).toBeNull();
  });
});

describe("pickPoint", () => {
  const positions = new Float32Array([
    0.0, 0.0, 0.0,   // center -> (100, 50)
    0.5, 0.0, 0.0,   // -> (150, 50)
    -0.5, -0.5, 0.0, // -> (50, 75)
  ]);

  it("picks the nearest point within the radius", () => {
    expect(pickPoint(positions, null, IDENTITY, 200, 100, 99, 51, 10)).toBe(0);
    expect(pickPoint(positions, null, IDENTITY, 200, 100, 147, 50, 10)).toBe(1);
  });

  it("returns null when nothing is in range", () => {
    expect(pickPoint(positions, null, IDENTITY, 200, 100, 10, 10, 5)).toBeNull();
  });

  it("reports full-resolution indices under decimation", () => {
    const displayed = new Uint32Array([0, 2]);
    // index 1 is not rendered, so a click near it hits nothing nearby
    expect(pickPoint(positions, displayed, IDENTITY, 200, 100, 150, 50, 5)).toBeNull();
    expect(pickPoint(positions, displayed, IDENTITY, 200, 100, 50, 75, 5)).toBe(2);
  });
});

describe("lodIndices", () => {
  it("renders everything below the threshold", () => {
    expect(lodIndices(100)).toBeNull();
    expect(lodIndices(LOD_THRESHOLD)).toBeNull();
  });

  it("caps the displayed count above the threshold", () => {
    const displayed = lodIndices(LOD_THRESHOLD * 3 + 17)!;
    expect(displayed.length).toBeLessThanOrEqual(LOD_THRESHOLD);
    expect(displayed[0]).toBe(0);
    // indices stay within the full-resolution range
    expect(Math.max(...displayed.slice(-1))).toBeLessThan(LOD_THRESHOLD * 3 + 17);
  });
});
