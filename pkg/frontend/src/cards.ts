/** Prediction cards: one per model, compared side by side. */

import type { PredictionEntry } from "./api.js";

export function formatProbability(p: number): string {
  return p.toFixed(2);
}

function drawOverlay(
  canvas: HTMLCanvasElement,
  base: HTMLImageElement,
  cam: HTMLImageElement | null,
  alpha: number,
): void {
  let ctx: CanvasRenderingContext2D | null;
  try {
    ctx = canvas.getContext("2d");
  } catch {
    return; // headless test DOMs throw here; painting is cosmetic
  }
  if (!ctx) return;
  ctx.globalAlpha = 1;
  ctx.drawImage(base, 0, 0, canvas.width, canvas.height);
  if (cam && alpha > 0) {
    ctx.globalAlpha = alpha;
    ctx.drawImage(cam, 0, 0, canvas.width, canvas.height);
    ctx.globalAlpha = 1;
  }
}

/**
 * Build a card element. The decision text is the API's string verbatim and
 * the headline number is the probability of abnormality to 2 decimals.
 * The opacity slider re-blends locally; it never contacts the service.
 */
export function buildCard(
  entry: PredictionEntry,
  previewUrl: string,
  doc: Document,
): HTMLElement {
  const card = doc.createElement("article");
  card.className = "card" + (entry.decision === "abnormal" ? " card-abnormal" : "");
  card.dataset.model = entry.model;
  card.dataset.decision = entry.decision;

  const title = doc.createElement("h3");
  title.textContent = entry.model;
  card.appendChild(title);

  const headline = doc.createElement("p");
  headline.className = "headline";
  headline.textContent = `p(abnormal) ${formatProbability(entry.probability_abnormal)}`;
  card.appendChild(headline);

  const decision = doc.createElement("p");
  decision.className = "decision";
  decision.textContent = entry.decision;
  card.appendChild(decision);

  const latency = doc.createElement("p");
  latency.className = "latency";
  latency.textContent = `${entry.elapsed_ms.toFixed(1)} ms`;
  card.appendChild(latency);

  const canvas = doc.createElement("canvas");
  canvas.width = 256;
  canvas.height = 256;
  canvas.className = "overlay";
  card.appendChild(canvas);

  const base = doc.createElement("img");
  base.src = previewUrl;
  let cam: HTMLImageElement | null = null;
  if (entry.cam_png_base64) {
    cam = doc.createElement("img");
    cam.src = `data:image/png;base64,${entry.cam_png_base64}`;
  }

  const slider = doc.createElement("input");
  slider.type = "range";
  slider.min = "0";
  slider.max = "100";
  slider.value = cam ? "40" : "0";
  slider.className = "alpha";
  if (!cam) slider.disabled = true;
  card.appendChild(slider);

  const redraw = () => drawOverlay(canvas, base, cam, Number(slider.value) / 100);
  slider.addEventListener("input", redraw);
  base.addEventListener("load", redraw);
  if (cam) cam.addEventListener("load", redraw);
  redraw();

  return card;
}
