/**
 * Typed client for the snapkit session API. All model math happens on the
 * server; this module only moves JSON. The fetch implementation is
 * injectable so tests can run without a network.
 */

import type { RleMask } from "./rle.js";

export type Domain = "indoor" | "outdoor" | "aerial";

export interface ScenePayload {
  positions: number[][];
  instance_ids?: number[];
  class_ids?: number[];
  class_names?: string[];
  scene_id?: string;
}

export interface SessionInfo {
  session_id: string;
  status: string;
  n_points: number;
  domain: Domain;
}

export interface ClickResponse {
  object_id: number;
  n_clicks: number;
  mask: RleMask;
  score: number;
  point_count: number;
}

export interface UndoResponse {
  undone: boolean;
  object_id?: number;
  object_removed?: boolean;
  n_clicks?: number;
  mask?: RleMask;
  score?: number;
}

export interface AutoResponse {
  n_masks: number;
  masks: RleMask[];
  scores: number[];
}

export interface TextMatch {
  mask_index: number;
  similarity: number;
  mask: RleMask;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class SnapkitClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch.bind(globalThis),
  ) {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      throw new ApiError(resp.status, await resp.text());
    }
    return (await resp.json()) as T;
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`);
    if (!resp.ok) {
      throw new ApiError(resp.status, await resp.text());
    }
    return (await resp.json()) as T;
  }

  health(): Promise<{ status: string }> {
    return this.get("/healthz");
  }

  createSession(domain: Domain, scene: ScenePayload): Promise<SessionInfo> {
    return this.post("/sessions", { domain, scene });
  }

  createSessionFromPath(domain: Domain, scenePath: string): Promise<SessionInfo> {
    return this.post("/sessions", { domain, scene_path: scenePath });
  }

  addClick(sessionId: string, objectId: number,
           point: [number, number, number]): Promise<ClickResponse> {
    return this.post(`/sessions/${sessionId}/clicks`,
                     { object_id: objectId, point });
  }

  undo(sessionId: string): Promise<UndoResponse> {
    return this.post(`/sessions/${sessionId}/undo`, {});
  }

  autoSegment(sessionId: string, overrides: Record<string, number> = {}):
      Promise<AutoResponse> {
    return this.post(`/sessions/${sessionId}/auto`, overrides);
  }

  textQuery(sessionId: string, query: string, tauSim = 0.0):
      Promise<{ matches: TextMatch[] }> {
    return this.post(`/sessions/${sessionId}/text-query`,
                     { query, tau_sim: tauSim });
  }
}
