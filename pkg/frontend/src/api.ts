/** Thin client for the bonecheck prediction service. */

export interface ModelInfo {
  name: string;
  input_size: number[];
}

export interface PredictionEntry {
  model: string;
  probability_normal: number;
  probability_abnormal: number;
  decision: string;
  elapsed_ms: number;
  cam_png_base64?: string;
}

export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, message: string) {
    super(message);
    this.status = status;
    this.name = "ApiError";
  }
}

type FetchLike = typeof fetch;

async function errorFrom(res: Response): Promise<ApiError> {
  let detail = res.statusText || `request failed (${res.status})`;
  try {
    const body = await res.json();
    if (body && typeof body.error === "string") detail = body.error;
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(res.status, detail);
}

export async function fetchModels(
  baseUrl: string,
  fetchImpl: FetchLike = fetch,
): Promise<ModelInfo[]> {
  const res = await fetchImpl(`${baseUrl}/models`);
  if (!res.ok) throw await errorFrom(res);
  const body = await res.json();
  return body.models as ModelInfo[];
}

export async function predict(
  baseUrl: string,
  image: File | Blob,
  models: string[],
  cam: boolean,
  fetchImpl: FetchLike = fetch,
): Promise<PredictionEntry[]> {
  const form = new FormData();
  form.append("image", image, image instanceof File ? image.name : "upload.png");
  form.append("models", models.join(","));
  form.append("cam", cam ? "true" : "false");
  const res = await fetchImpl(`${baseUrl}/predict`, { method: "POST", body: form });
  if (!res.ok) throw await errorFrom(res);
  return (await res.json()) as PredictionEntry[];
}

/** Human-readable message for any failure mode of the two calls above. */
export function describeError(err: unknown): string {
  if (err instanceof ApiError) {
    switch (err.status) {
      case 400:
        return `The file could not be read as an image: ${err.message}`;
      case 404:
        return `Unknown model: ${err.message}`;
      case 413:
        return `Image too large: ${err.message}`;
      default:
        return `Service error (${err.status}): ${err.message}`;
    }
  }
  if (err instanceof Error) return `Could not reach the service: ${err.message}`;
  return "Could not reach the service.";
}
