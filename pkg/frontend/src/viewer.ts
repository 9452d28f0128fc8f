/**
 * three.js rendering of the point cloud with per-object mask overlays.
 * All mask bits come from ViewerState (server-decoded); this module only
 * colors points and translates mouse clicks into full-resolution point
 * indices via the pure picking math.
 */

import * as THREE from "three";

import { colorForObject, type Rgb } from "./colors.js";
import { lodIndices, pickPoint } from "./picking.js";
import type { ViewerState } from "./state.js";

const BASE_COLOR: Rgb = [0.62, 0.62, 0.66];
const HIGHLIGHT_COLOR: Rgb = [1.0, 0.15, 0.15];
const PICK_RADIUS_PX = 12;

export class PointCloudViewer {
  private renderer: THREE.WebGLRenderer;
  private scene = new THREE.Scene();
  private camera: THREE.PerspectiveCamera;
  private points: THREE.Points | null = null;
  private positions: Float32Array = new Float32Array(0);
  private displayed: Uint32Array | null = null;
  private colors: Float32Array = new Float32Array(0);
  private dragging = false;
  private orbit = { theta: 0.8, phi: 1.0, radius: 10, target: new THREE.Vector3() };

  constructor(private readonly canvas: HTMLCanvasElement,
              private readonly state: ViewerState,
              private readonly onPick: (index: number) => void) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.camera = new THREE.PerspectiveCamera(
      50, canvas.clientWidth / canvas.clientHeight, 0.01, 10_000);
    this.scene.background = new THREE.Color(0x10131a);
    this.bindInput();
    this.animate();
  }

  setCloud(positions: Float32Array): void {
    this.positions = positions;
    const n = positions.length / 3;
    this.displayed = lodIndices(n);
    const shown = this.displayed ? this.displayed.length : n;

    const drawPositions = new Float32Array(shown * 3);
    for (let j = 0; j < shown; j++) {
      const i = this.displayed ? this.displayed[j] : j;
      drawPositions.set(positions.subarray(3 * i, 3 * i + 3), 3 * j);
    }
    this.colors = new Float32Array(shown * 3);

    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute("position", new THREE.BufferAttribute(drawPositions, 3));
    geometry.setAttribute("color", new THREE.BufferAttribute(this.colors, 3));
    geometry.computeBoundingSphere();
    const sphere = geometry.boundingSphere!;
    this.orbit.target.copy(sphere.center);
    this.orbit.radius = sphere.radius * 2.5;
    const material = new THREE.PointsMaterial({
      size: Math.max(sphere.radius / 150, 0.005),
      vertexColors: true,
    });
    if (this.points) {
      this.scene.remove(this.points);
    }
    this.points = new THREE.Points(geometry, material);
    this.scene.add(this.points);
    this.refreshOverlay();
  }

  /** Recolor from the state's server-derived masks. */
  refreshOverlay(): void {
    if (!this.points) return;
    const n = this.positions.length / 3;
    const labels = this.state.overlayMode === "masks"
      ? this.state.objectLabelMap() : new Int32Array(n).fill(-1);
    const highlight = new Uint8Array(n);
    for (const h of this.state.highlights) {
      for (let i = 0; i < h.mask.length; i++) {
        if (h.mask[i]) highlight[i] = 1;
      }
    }
    const shown = this.displayed ? this.displayed.length : n;
    for (let j = 0; j < shown; j++) {
      const i = this.displayed ? this.displayed[j] : j;
      let rgb = BASE_COLOR;
      if (highlight[i]) {
        rgb = HIGHLIGHT_COLOR;
      } else if (labels[i] >= 0) {
        rgb = colorForObject(labels[i]);
      }
      this.colors.set(rgb, 3 * j);
    }
    const attr = this.points.geometry.getAttribute("color") as THREE.BufferAttribute;
    attr.needsUpdate = true;
  }

  private viewProjection(): Float32Array {
    this.camera.updateMatrixWorld();
    const m = new THREE.Matrix4()
      .multiplyMatrices(this.camera.projectionMatrix,
                        this.camera.matrixWorldInverse);
    return new Float32Array(m.elements);
  }

  private bindInput(): void {
    let moved = 0;
    this.canvas.addEventListener("mousedown", () => {
      this.dragging = true;
      moved = 0;
    });
    window.addEventListener("mouseup", () => {
      this.dragging = false;
    });
    this.canvas.addEventListener("mousemove", (ev) => {
      if (!this.dragging) return;
      moved += Math.abs(ev.movementX) + Math.abs(ev.movementY);
      this.orbit.theta -= ev.movementX * 0.005;
      this.orbit.phi = Math.min(Math.max(this.orbit.phi - ev.movementY * 0.005, 0.05),
                                Math.PI - 0.05);
    });
    this.canvas.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      this.orbit.radius *= Math.exp(ev.deltaY * 0.001);
    });
    this.canvas.addEventListener("click", (ev) => {
      if (moved > 4 || this.positions.length === 0) return;  // drag, not click
      const rect = this.canvas.getBoundingClientRect();
      const index = pickPoint(
        this.positions, this.displayed, this.viewProjection(),
        rect.width, rect.height,
        ev.clientX - rect.left, ev.clientY - rect.top, PICK_RADIUS_PX);
      if (index !== null) {
        this.onPick(index);
      }
    });
  }

  private animate = (): void => {
    requestAnimationFrame(this.animate);
    const { theta, phi, radius, target } = this.orbit;
    this.camera.position.set(
      target.x + radius * Math.sin(phi) * Math.cos(theta),
      target.y + radius * Math.sin(phi) * Math.sin(theta),
      target.z + radius * Math.cos(phi),
    );
    this.camera.up.set(0, 0, 1);
    this.camera.lookAt(target);
    const w = this.canvas.clientWidth, h = this.canvas.clientHeight;
    if (this.canvas.width !== w || this.canvas.height !== h) {
      this.renderer.setSize(w, h, false);
      this.camera.aspect = w / h;
      this.camera.updateProjectionMatrix();
    }
    this.renderer.render(this.scene, this.camera);
  };
}
