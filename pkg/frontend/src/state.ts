/**
 * Client-side annotation state. Every displayed mask is decoded verbatim
 * from a server response; the client never invents mask bits. Mutating
 * requests for a session run strictly one at a time: clicks issued while a
 * request is in flight are queued, not dropped, mirroring the server's
 * per-session serialization.
 */

import type { ClickResponse, Domain, SnapkitClient, TextMatch, UndoResponse } from "./api.js";
import { rleDecode } from "./rle.js";

export type OverlayMode = "masks" | "ground-truth" | "none";

export interface ObjectState {
  objectId: number;
  clicks: [number, number, number][];
  mask: Uint8Array;
  score: number;
}

export interface Highlight {
  maskIndex: number;
  similarity: number;
  mask: Uint8Array;
}

export class ViewerState {
  sessionId: string | null = null;
  nPoints = 0;
  domain: Domain = "indoor";
  activeObjectId = 0;
  overlayMode: OverlayMode = "masks";
  objects = new Map<number, ObjectState>();
  autoMasks: Uint8Array[] = [];
  autoScores: number[] = [];
  highlights: Highlight[] = [];

  private queueTail: Promise<unknown> = Promise.resolve();

  constructor(private readonly client: SnapkitClient) {}

  /** Serialize a mutating request; later calls wait for earlier ones. */
  private enqueue<T>(work: () => Promise<T>): Promise<T> {
    const next = this.queueTail.then(work, work);
    this.queueTail = next.catch(() => undefined);
    return next;
  }

  get pending(): Promise<unknown> {
    return this.queueTail;
  }

  async openSession(domain: Domain, scene: {
    positions: number[][];
    instance_ids?: number[];
    class_ids?: number[];
    class_names?: string[];
    scene_id?: string;
  }): Promise<void> {
    const info = await this.client.createSession(domain, scene);
    this.sessionId = info.session_id;
    this.nPoints = info.n_points;
    this.domain = domain;
    this.objects.clear();
    this.autoMasks = [];
    this.autoScores = [];
    this.highlights = [];
  }

  /** Queue a click on the active (or given) object. */
  addClick(point: [number, number, number],
           objectId: number = this.activeObjectId): Promise<ClickResponse> {
    return this.enqueue(async () => {
      if (this.sessionId === null) {
        throw new Error("no open session");
      }
      const resp = await this.client.addClick(this.sessionId, objectId, point);
      const existing = this.objects.get(objectId);
      const clicks = existing ? [...existing.clicks, point] : [point];
      this.objects.set(objectId, {
        objectId,
        clicks,
        mask: rleDecode(resp.mask),
        score: resp.score,
      });
      return resp;
    });
  }

  /** Queue an undo; mirrors the server's interpretation of the stack. */
  undo(): Promise<UndoResponse> {
    return this.enqueue(async () => {
      if (this.sessionId === null) {
        throw new Error("no open session");
      }
      const resp = await this.client.undo(this.sessionId);
      if (!resp.undone || resp.object_id === undefined) {
        return resp;
      }
      const obj = this.objects.get(resp.object_id);
      if (resp.object_removed) {
        this.objects.delete(resp.object_id);
      } else if (obj && resp.mask) {
        this.objects.set(resp.object_id, {
          objectId: resp.object_id,
          clicks: obj.clicks.slice(0, -1),
          mask: rleDecode(resp.mask),
          score: resp.score ?? obj.score,
        });
      }
      return resp;
    });
  }

  autoSegment(overrides: Record<string, number> = {}): Promise<number> {
    return this.enqueue(async () => {
      if (this.sessionId === null) {
        throw new Error("no open session");
      }
      const resp = await this.client.autoSegment(this.sessionId, overrides);
      this.autoMasks = resp.masks.map(rleDecode);
      this.autoScores = resp.scores;
      return resp.n_masks;
    });
  }

  textQuery(query: string, tauSim = 0.0): Promise<TextMatch[]> {
    return this.enqueue(async () => {
      if (this.sessionId === null) {
        throw new Error("no open session");
      }
      const resp = await this.client.textQuery(this.sessionId, query, tauSim);
      this.highlights = resp.matches.map((m) => ({
        maskIndex: m.mask_index,
        similarity: m.similarity,
        mask: rleDecode(m.mask),
      }));
      return resp.matches;
    });
  }

  /** Per-point object labels for the overlay; -1 means unassigned.
   * Later clicks win where interactive masks overlap. */
  objectLabelMap(): Int32Array {
    const labels = new Int32Array(this.nPoints).fill(-1);
    const ids = [...this.objects.keys()].sort((a, b) => a - b);
    for (const id of ids) {
      const mask = this.objects.get(id)!.mask;
      for (let i = 0; i < mask.length; i++) {
        if (mask[i]) labels[i] = id;
      }
    }
    return labels;
  }
}
