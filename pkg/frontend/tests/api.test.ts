import { describe, expect, it, vi } from "vitest";

import { ApiError, describeError, fetchModels, predict } from "../src/api.js";

function jsonResponse(status: number, body: unknown) {
  return {
    ok: status >= 200 && status < 300,
    status,
    statusText: "",
    json: async () => body,
  } as Response;
}

const MODELS = [
  { name: "micro_mobile", input_size: [1, 32, 32] },
  { name: "micro_cell", input_size: [1, 32, 32] },
  { name: "micro_xception", input_size: [1, 32, 32] },
];

describe("fetchModels", () => {
  it("returns the registered models", async () => {
    const fetchImpl = vi.fn(async () => jsonResponse(200, { models: MODELS }));
    const models = await fetchModels("", fetchImpl as unknown as typeof fetch);
    expect(models.map((m) => m.name)).toEqual([
      "micro_mobile",
      "micro_cell",
      "micro_xception",
    ]);
    expect(fetchImpl).toHaveBeenCalledWith("/models");
  });

  it("raises ApiError with the body message on failure", async () => {
    const fetchImpl = vi.fn(async () => jsonResponse(500, { error: "boom" }));
    await expect(
      fetchModels("", fetchImpl as unknown as typeof fetch),
    ).rejects.toMatchObject({ status: 500, message: "boom" });
  });
});

describe("predict", () => {
  it("issues exactly one POST with comma-joined model names", async () => {
    const fetchImpl = vi.fn(async () =>
      jsonResponse(200, [
        {
          model: "micro_mobile",
          probability_normal: 0.2,
          probability_abnormal: 0.8,
          decision: "abnormal",
          elapsed_ms: 3.5,
        },
      ]),
    );
    const blob = new Blob([new Uint8Array([1, 2, 3])]);
    const out = await predict(
      "http://svc",
      blob,
      ["micro_mobile", "micro_cell"],
      true,
      fetchImpl as unknown as typeof fetch,
    );
    expect(out).toHaveLength(1);
    expect(fetchImpl).toHaveBeenCalledTimes(1);
    const [url, init] = fetchImpl.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe("http://svc/predict");
    expect(init.method).toBe("POST");
    const form = init.body as FormData;
    expect(form.get("models")).toBe("micro_mobile,micro_cell");
    expect(form.get("cam")).toBe("true");
  });

  it("propagates the 413 body message", async () => {
    const fetchImpl = vi.fn(async () =>
      jsonResponse(413, { error: "upload of 71680 bytes exceeds limit of 65536 bytes" }),
    );
    await expect(
      predict("", new Blob([]), ["m"], false, fetchImpl as unknown as typeof fetch),
    ).rejects.toBeInstanceOf(ApiError);
  });
});

describe("describeError", () => {
  it("renders the size-limit message for 413 citing the limit", () => {
    const msg = describeError(
      new ApiError(413, "upload of 71680 bytes exceeds limit of 65536 bytes"),
    );
    expect(msg).toContain("too large");
    expect(msg).toContain("limit");
    expect(msg).toContain("65536");
  });

  it("names the unknown model for 404", () => {
    expect(describeError(new ApiError(404, "unknown model: ghost"))).toContain("ghost");
  });

  it("explains undecodable uploads for 400", () => {
    expect(describeError(new ApiError(400, "not a decodable image"))).toContain(
      "could not be read",
    );
  });

  it("treats plain errors as connectivity problems", () => {
    expect(describeError(new Error("ECONNREFUSED"))).toContain("reach the service");
  });
});
