import type { Triple } from "./strokes.js";

export interface ModelInfo {
  name: string;
  kind: string;
  n_max: number;
  label: string;
  supports_completion: boolean;
}

export interface CompletionRequest {
  model: string;
  tau: number;
  strokes: Triple[];
}

export interface CompletionResponse {
  strokes: Triple[];
  ske_score: number;
  generation_id: string;
}

export class ApiError extends Error {
  constructor(
    message: string,
    public status: number,
  ) {
    super(message);
  }
}

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  const res = await fetch(path, init);
  if (!res.ok) {
    const body = await res.json().catch(() => ({}));
    throw new ApiError(body.detail ?? `HTTP ${res.status}`, res.status);
  }
  return res.json() as Promise<T>;
}

export function fetchModels(): Promise<ModelInfo[]> {
  return request<{ models: ModelInfo[] }>("/v1/models").then((b) => b.models);
}

export function requestCompletion(
  req: CompletionRequest,
  signal?: AbortSignal,
): Promise<CompletionResponse> {
  return request<CompletionResponse>("/v1/complete", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(req),
    signal,
  });
}
