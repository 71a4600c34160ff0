/**
 * Client-side alpha blend between the uploaded radiograph and a CAM overlay.
 *
 * out = (1 - alpha) * base + alpha * cam, per RGB channel; the alpha channel
 * of the output stays fully opaque. alpha 0 must reproduce the base exactly.
 */

export function blendPixels(
  base: Uint8ClampedArray,
  cam: Uint8ClampedArray,
  alpha: number,
): Uint8ClampedArray {
  if (base.length !== cam.length) {
    throw new Error(`pixel buffers differ in length: ${base.length} vs ${cam.length}`);
  }
  if (alpha < 0 || alpha > 1 || Number.isNaN(alpha)) {
    throw new Error(`alpha out of range: ${alpha}`);
  }
  if (alpha === 0) return base.slice();
  if (alpha === 1) {
    const out = cam.slice();
    for (let i = 3; i < out.length; i += 4) out[i] = 255;
    return out;
  }
  const out = new Uint8ClampedArray(base.length);
  for (let i = 0; i < base.length; i += 4) {
    out[i] = (1 - alpha) * base[i] + alpha * cam[i];
    out[i + 1] = (1 - alpha) * base[i + 1] + alpha * cam[i + 1];
    out[i + 2] = (1 - alpha) * base[i + 2] + alpha * cam[i + 2];
    out[i + 3] = 255;
  }
  return out;
}
