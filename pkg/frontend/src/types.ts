/** Wire types for /v1/chat plus the client-side session shapes. */

export interface RleMask {
  counts: number[];
  size: [number, number]; // [height, width]
}

/** PNG masks travel as base64 strings, RLE masks as count arrays. */
export type MaskPayload = string | RleMask;

export interface SpanPayload {
  slot_index: number;
  phrase: string;
  mask: MaskPayload;
  area_px: number;
}

export interface ChatResponsePayload {
  text: string;
  spans: SpanPayload[];
  model_version: string;
  latency_ms: number;
}

export interface HistoryEntry {
  role: 'user' | 'assistant';
  text: string;
}

export interface ChatRequestPayload {
  image: string; // base64 PNG, 8-bit grayscale
  history: HistoryEntry[];
  message: string;
  options?: {
    max_new_tokens?: number;
    mask_format?: 'png_base64' | 'rle';
  };
}

export interface HealthPayload {
  status: string;
  model_version: string;
}

/** Binary mask bitmap, row-major, one byte per pixel (0 or 1). */
export interface Bitmap {
  width: number;
  height: number;
  data: Uint8Array;
}

/** 8-bit grayscale image, row-major. */
export interface GrayImage {
  width: number;
  height: number;
  gray: Uint8Array;
}

/** RGBA pixel buffer compatible with canvas ImageData. */
export interface RgbaImage {
  width: number;
  height: number;
  data: Uint8ClampedArray;
}

export interface DecodedSpan {
  slotIndex: number;
  phrase: string;
  areaPx: number;
  mask: Bitmap;
}

export interface TranscriptTurn {
  role: 'user' | 'assistant';
  text: string;
  spans: DecodedSpan[];
  /** per-slot overlay visibility, parallel to spans */
  toggles: boolean[];
}
