import assert from 'node:assert/strict';
import { readFileSync } from 'node:fs';
import { test } from 'node:test';

import { decodeRle, pngBase64ToBitmap } from '../src/maskCodec.js';
import { borderMask, grayToRgba, imagesEqual, renderOverlay } from '../src/overlay.js';
import { colorForSlot, PALETTE } from '../src/palette.js';
import type { DecodedSpan, GrayImage, RgbaImage, RleMask } from '../src/types.js';

const fixturesUrl = new URL('../../tests/fixtures/', import.meta.url);
const maskPairs: { png: string; rle: RleMask }[] = JSON.parse(
  readFileSync(new URL('mask_pairs.json', fixturesUrl), 'utf-8'),
);

function flatGray(width: number, height: number, value = 128): GrayImage {
  return { width, height, gray: new Uint8Array(width * height).fill(value) };
}

function span(slotIndex: number, mask: DecodedSpan['mask']): DecodedSpan {
  return {
    slotIndex,
    phrase: `slot-${slotIndex}`,
    areaPx: mask.data.reduce((n, v) => n + v, 0),
    mask,
  };
}

function clone(image: RgbaImage): RgbaImage {
  return {
    width: image.width,
    height: image.height,
    data: new Uint8ClampedArray(image.data),
  };
}

test('all toggles off leaves the base image untouched', () => {
  const mask = decodeRle(maskPairs[0].rle);
  const base = grayToRgba(flatGray(mask.width, mask.height));
  const out = renderOverlay(base, [span(0, mask)], [false]);
  assert.ok(imagesEqual(out, base));
});

test('a visible span recolors exactly its mask pixels', () => {
  const mask = decodeRle(maskPairs[0].rle);
  const base = grayToRgba(flatGray(mask.width, mask.height));
  const out = renderOverlay(base, [span(0, mask)], [true]);
  for (let i = 0; i < mask.data.length; i++) {
    const changed =
      out.data[i * 4] !== base.data[i * 4] ||
      out.data[i * 4 + 1] !== base.data[i * 4 + 1] ||
      out.data[i * 4 + 2] !== base.data[i * 4 + 2];
    assert.equal(changed, mask.data[i] === 1, `pixel ${i}`);
  }
});

test('two spans render with distinct colors', () => {
  const m0 = decodeRle(maskPairs[0].rle);
  const m1 = decodeRle(maskPairs[1].rle);
  assert.notDeepEqual(colorForSlot(0), colorForSlot(1));
  const base = grayToRgba(flatGray(m0.width, m0.height));
  const out = renderOverlay(base, [span(0, m0), span(1, m1)], [true, true]);
  const sample = (mask: typeof m0) => {
    const i = mask.data.findIndex((v, k) => v === 1 && m0.data[k] + m1.data[k] === 1);
    return [out.data[i * 4], out.data[i * 4 + 1], out.data[i * 4 + 2]];
  };
  assert.notDeepEqual(sample(m0), sample(m1));
});

test('toggling one slot hides only that slot', () => {
  const m0 = decodeRle(maskPairs[0].rle);
  const m1 = decodeRle(maskPairs[1].rle);
  const base = grayToRgba(flatGray(m0.width, m0.height));
  const both = renderOverlay(base, [span(0, m0), span(1, m1)], [true, true]);
  const onlySecond = renderOverlay(base, [span(0, m0), span(1, m1)], [false, true]);
  const onlyFirst = renderOverlay(base, [span(0, m0)], [true]);
  assert.ok(!imagesEqual(both, onlySecond));
  // hiding slot 0 must not disturb slot-1 pixels outside the overlap
  for (let i = 0; i < m1.data.length; i++) {
    if (m1.data[i] === 1 && m0.data[i] === 0) {
      assert.equal(onlySecond.data[i * 4], both.data[i * 4]);
    }
    if (m0.data[i] === 1 && m1.data[i] === 0) {
      assert.equal(onlySecond.data[i * 4], base.data[i * 4]);
      assert.equal(onlyFirst.data[i * 4], both.data[i * 4]);
    }
  }
});

test('png and rle masks render pixel-identical overlays', async () => {
  for (const pair of maskPairs) {
    const fromPng = await pngBase64ToBitmap(pair.png);
    const fromRle = decodeRle(pair.rle);
    const base = grayToRgba(flatGray(fromRle.width, fromRle.height, 90));
    const a = renderOverlay(base, [span(0, fromPng)], [true]);
    const b = renderOverlay(base, [span(0, fromRle)], [true]);
    assert.ok(imagesEqual(a, b));
  }
});

test('render never mutates inputs', () => {
  const mask = decodeRle(maskPairs[1].rle);
  const base = grayToRgba(flatGray(mask.width, mask.height));
  const baseCopy = clone(base);
  const maskCopy = new Uint8Array(mask.data);
  renderOverlay(base, [span(0, mask)], [true]);
  assert.ok(imagesEqual(base, baseCopy));
  assert.deepEqual(Array.from(mask.data), Array.from(maskCopy));
});

test('render rejects mismatched mask geometry', () => {
  const mask = decodeRle(maskPairs[0].rle);
  const base = grayToRgba(flatGray(mask.width + 4, mask.height));
  assert.throws(() => renderOverlay(base, [span(0, mask)], [true]), /mask is/);
});

test('border pixels of a full mask are the frame', () => {
  const full = {
    width: 4,
    height: 3,
    data: new Uint8Array(12).fill(1),
  };
  const border = borderMask(full);
  assert.equal(border.reduce((n, v) => n + v, 0), 10); // all but 2 interior
});

test('palette cycles after eight slots', () => {
  assert.deepEqual(colorForSlot(0), PALETTE[0]);
  assert.deepEqual(colorForSlot(8), PALETTE[0]);
  assert.deepEqual(colorForSlot(11), PALETTE[3]);
});
