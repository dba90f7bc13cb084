/** Pure overlay compositing: semi-transparent fills plus solid outlines.
 *
 * All functions return fresh buffers; neither the base image nor the mask
 * bitmaps are ever mutated.
 */

import { colorForSlot } from './palette.js';
import type { Bitmap, DecodedSpan, GrayImage, RgbaImage } from './types.js';

export const FILL_ALPHA = 0.45;

export function grayToRgba(image: GrayImage): RgbaImage {
  const data = new Uint8ClampedArray(image.width * image.height * 4);
  for (let i = 0; i < image.gray.length; i++) {
    const v = image.gray[i];
    data[i * 4] = v;
    data[i * 4 + 1] = v;
    data[i * 4 + 2] = v;
    data[i * 4 + 3] = 255;
  }
  return { width: image.width, height: image.height, data };
}

/** Foreground pixels with at least one out-of-mask 4-neighbor. */
export function borderMask(mask: Bitmap): Uint8Array {
  const { width, height, data } = mask;
  const border = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = y * width + x;
      if (!data[i]) continue;
      const bare =
        y === 0 || y === height - 1 || x === 0 || x === width - 1 ||
        !data[i - width] || !data[i + width] || !data[i - 1] || !data[i + 1];
      if (bare) border[i] = 1;
    }
  }
  return border;
}

/** Composite visible spans over the base image; hidden slots leave no trace. */
export function renderOverlay(
  base: RgbaImage,
  spans: readonly DecodedSpan[],
  toggles: readonly boolean[],
): RgbaImage {
  const out = {
    width: base.width,
    height: base.height,
    data: new Uint8ClampedArray(base.data),
  };
  spans.forEach((span, k) => {
    if (toggles[k] === false) return;
    if (span.mask.width !== base.width || span.mask.height !== base.height) {
      throw new Error(
        `span ${span.slotIndex} mask is ${span.mask.width}x${span.mask.height}, ` +
        `image is ${base.width}x${base.height}`,
      );
    }
    const color = colorForSlot(span.slotIndex);
    const border = borderMask(span.mask);
    for (let i = 0; i < span.mask.data.length; i++) {
      if (!span.mask.data[i]) continue;
      const alpha = border[i] ? 1.0 : FILL_ALPHA;
      const o = i * 4;
      out.data[o] = Math.round(out.data[o] * (1 - alpha) + color.r * alpha);
      out.data[o + 1] = Math.round(out.data[o + 1] * (1 - alpha) + color.g * alpha);
      out.data[o + 2] = Math.round(out.data[o + 2] * (1 - alpha) + color.b * alpha);
    }
  });
  return out;
}

export function imagesEqual(a: RgbaImage, b: RgbaImage): boolean {
  if (a.width !== b.width || a.height !== b.height) return false;
  for (let i = 0; i < a.data.length; i++) {
    if (a.data[i] !== b.data[i]) return false;
  }
  return true;
}
