/** Session state: the transcript, per-slot overlay toggles, and export.
 *
 * The history sent with each request is exactly the rendered transcript, and
 * one request is in flight at a time.
 */

import { ApiError, ChatClient } from './api.js';
import { decodeMaskPayload } from './maskCodec.js';
import type {
  ChatResponsePayload,
  DecodedSpan,
  HistoryEntry,
  TranscriptTurn,
} from './types.js';

export interface SessionExport {
  image_id: string;
  turns: {
    role: string;
    text: string;
    spans: { slot_index: number; phrase: string; area_px: number }[];
  }[];
}

export async function computeImageId(pngBytes: Uint8Array): Promise<string> {
  const digest = await crypto.subtle.digest('SHA-256', pngBytes as BufferSource);
  return Array.from(new Uint8Array(digest))
    .map((b) => b.toString(16).padStart(2, '0'))
    .join('')
    .slice(0, 16);
}

export class ChatSession {
  readonly turns: TranscriptTurn[] = [];
  private imageB64: string | null = null;
  private imageId = '';
  private inFlight = false;

  constructor(private readonly client: ChatClient) {}

  get busy(): boolean {
    return this.inFlight;
  }

  get currentImageId(): string {
    return this.imageId;
  }

  get hasImage(): boolean {
    return this.imageB64 !== null;
  }

  setImage(pngBase64: string, imageId: string): void {
    if (this.turns.length > 0) {
      throw new Error('cannot change the image mid-session');
    }
    this.imageB64 = pngBase64;
    this.imageId = imageId;
  }

  history(): HistoryEntry[] {
    return this.turns.map((t) => ({ role: t.role, text: t.text }));
  }

  async sendTurn(
    message: string,
    maskFormat: 'png_base64' | 'rle' = 'rle',
  ): Promise<TranscriptTurn> {
    if (!this.imageB64) {
      throw new Error('upload an image before chatting');
    }
    if (this.inFlight) {
      throw new Error('a request is already in flight');
    }
    this.inFlight = true;
    try {
      const response = await this.client.chat({
        image: this.imageB64,
        history: this.history(),
        message,
        options: { mask_format: maskFormat },
      });
      const spans = await decodeSpans(response);
      // state mutates only after the full response decoded successfully
      this.turns.push({ role: 'user', text: message, spans: [], toggles: [] });
      const turn: TranscriptTurn = {
        role: 'assistant',
        text: response.text,
        spans,
        toggles: spans.map(() => true),
      };
      this.turns.push(turn);
      return turn;
    } finally {
      this.inFlight = false;
    }
  }

  toggleSlot(turnIndex: number, slotIndex: number, visible?: boolean): void {
    const turn = this.turns[turnIndex];
    if (!turn || turn.toggles[slotIndex] === undefined) {
      throw new Error(`no slot ${slotIndex} in turn ${turnIndex}`);
    }
    turn.toggles[slotIndex] = visible ?? !turn.toggles[slotIndex];
  }

  /** Spans of the latest assistant turn (the rendered overlay set). */
  latestSpans(): { spans: DecodedSpan[]; toggles: boolean[] } {
    for (let i = this.turns.length - 1; i >= 0; i--) {
      if (this.turns[i].role === 'assistant') {
        return { spans: this.turns[i].spans, toggles: this.turns[i].toggles };
      }
    }
    return { spans: [], toggles: [] };
  }

  /** Deterministic JSON matching the dataset conversation record shape. */
  exportSession(): string {
    const doc: SessionExport = {
      image_id: this.imageId,
      turns: this.turns.map((t) => ({
        role: t.role,
        text: t.text,
        spans: t.spans.map((s) => ({
          slot_index: s.slotIndex,
          phrase: s.phrase,
          area_px: s.areaPx,
        })),
      })),
    };
    return JSON.stringify(doc, null, 2);
  }
}

async function decodeSpans(response: ChatResponsePayload): Promise<DecodedSpan[]> {
  const spans: DecodedSpan[] = [];
  for (const span of response.spans) {
    spans.push({
      slotIndex: span.slot_index,
      phrase: span.phrase,
      areaPx: span.area_px,
      mask: await decodeMaskPayload(span.mask),
    });
  }
  return spans;
}

export { ApiError };
