/** Changed-pixel comparison between two rendered views.
 *
 * Works on decoded pixels only — the comparison is pure byte equality, so
 * what it highlights is exactly what the server rendered differently.
 */

import type { DecodedImage } from "./png.js";
import { encodePng } from "./png.js";

export interface PixelDiff {
  width: number;
  height: number;
  /** Number of pixels that differ in any channel. */
  changed: number;
  /** One byte per pixel: 1 where the images differ, 0 where they match. */
  mask: Uint8Array;
}

export function diffImages(a: DecodedImage, b: DecodedImage): PixelDiff {
  if (a.width !== b.width || a.height !== b.height || a.channels !== b.channels) {
    throw new Error("images must have identical dimensions to compare");
  }
  const count = a.width * a.height;
  const mask = new Uint8Array(count);
  let changed = 0;
  for (let p = 0; p < count; p++) {
    const base = p * a.channels;
    for (let c = 0; c < a.channels; c++) {
      if (a.pixels[base + c] !== b.pixels[base + c]) {
        mask[p] = 1;
        changed++;
        break;
      }
    }
  }
  return { width: a.width, height: a.height, changed, mask };
}

export const HIGHLIGHT_COLOR = { r: 255, g: 0, b: 128, a: 160 } as const;

/** Translucent overlay PNG marking changed pixels; transparent elsewhere. */
export function highlightOverlay(diff: PixelDiff): Uint8Array {
  const rgba = new Uint8Array(diff.width * diff.height * 4);
  for (let p = 0; p < diff.mask.length; p++) {
    if (diff.mask[p]) {
      rgba[p * 4] = HIGHLIGHT_COLOR.r;
      rgba[p * 4 + 1] = HIGHLIGHT_COLOR.g;
      rgba[p * 4 + 2] = HIGHLIGHT_COLOR.b;
      rgba[p * 4 + 3] = HIGHLIGHT_COLOR.a;
    }
  }
  return encodePng(diff.width, diff.height, 4, rgba);
}
