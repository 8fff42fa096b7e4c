import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiError, fetchModels, requestCompletion } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("api client", () => {
  it("posts completion requests and returns the body", async () => {
    const fetchMock = vi.fn().mockResolvedValue(
      jsonResponse({ strokes: [[1, 2, 0]], ske_score: 0.2, generation_id: "abc" }),
    );
    vi.stubGlobal("fetch", fetchMock);

    const res = await requestCompletion({ model: "boxes", tau: 0.25, strokes: [[1, 1, 1]] });
    expect(res.strokes).toEqual([[1, 2, 0]]);
    expect(fetchMock).toHaveBeenCalledWith(
      "/v1/complete",
      expect.objectContaining({ method: "POST" }),
    );
    const body = JSON.parse(fetchMock.mock.calls[0][1].body as string);
    expect(body).toEqual({ model: "boxes", tau: 0.25, strokes: [[1, 1, 1]] });
  });

  it("surfaces service error details", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn().mockResolvedValue(jsonResponse({ detail: "tau must be in (0, 1]" }, 400)),
    );
    await expect(
      requestCompletion({ model: "boxes", tau: 5, strokes: [[1, 1, 1]] }),
    ).rejects.toThrowError(/tau must be/);
  });

  it("wraps non-json failures with the status code", async () => {
    vi.stubGlobal("fetch", vi.fn().mockResolvedValue(new Response("boom", { status: 503 })));
    const err = await requestCompletion({ model: "m", tau: 0.5, strokes: [[1, 1, 0]] }).catch(
      (e) => e,
    );
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(503);
  });

  it("fetches the model list", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn().mockResolvedValue(
        jsonResponse({
          models: [
            { name: "boxes", kind: "skegan", n_max: 8, label: "box", supports_completion: true },
          ],
        }),
      ),
    );
    const models = await fetchModels();
    expect(models).toHaveLength(1);
    expect(models[0].name).toBe("boxes");
  });

  it("passes the abort signal through to fetch", async () => {
    const fetchMock = vi.fn().mockResolvedValue(jsonResponse({}));
    vi.stubGlobal("fetch", fetchMock);
    const controller = new AbortController();
    await requestCompletion({ model: "m", tau: 0.5, strokes: [[1, 1, 0]] }, controller.signal);
    expect(fetchMock.mock.calls[0][1].signal).toBe(controller.signal);
  });
});
