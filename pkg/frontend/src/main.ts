/** Browser wiring: image upload, chat transcript, overlay canvas, export. */

import { ApiError, ChatClient } from './api.js';
import { decodePngGray } from './maskCodec.js';
import { grayToRgba, renderOverlay } from './overlay.js';
import { colorForSlot, cssColor } from './palette.js';
import { ChatSession, computeImageId } from './session.js';
import type { RgbaImage } from './types.js';

const DEFAULT_BASE_URL =
  (window as { MEDSEG_BASE_URL?: string }).MEDSEG_BASE_URL ?? 'http://127.0.0.1:8787';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const serverInput = el<HTMLInputElement>('server-url');
const healthBadge = el<HTMLSpanElement>('health');
const fileInput = el<HTMLInputElement>('image-file');
const canvas = el<HTMLCanvasElement>('view');
const transcript = el<HTMLDivElement>('transcript');
const messageInput = el<HTMLInputElement>('message');
const sendButton = el<HTMLButtonElement>('send');
const exportButton = el<HTMLButtonElement>('export');
const banner = el<HTMLDivElement>('banner');

serverInput.value = DEFAULT_BASE_URL;

let client = new ChatClient(serverInput.value);
let session = new ChatSession(client);
let baseImage: RgbaImage | null = null;

function showError(message: string): void {
  banner.textContent = message;
  banner.classList.remove('hidden');
}

banner.addEventListener('click', () => banner.classList.add('hidden'));

serverInput.addEventListener('change', () => {
  client = new ChatClient(serverInput.value);
  session = new ChatSession(client);
  transcript.replaceChildren();
  void refreshHealth();
});

async function refreshHealth(): Promise<void> {
  try {
    const health = await client.health();
    healthBadge.textContent = `${health.status} (${health.model_version})`;
    healthBadge.className = 'ok';
  } catch (err) {
    healthBadge.textContent = err instanceof ApiError ? err.message : 'unreachable';
    healthBadge.className = 'down';
  }
}

fileInput.addEventListener('change', async () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  try {
    const bytes = new Uint8Array(await file.arrayBuffer());
    const gray = await decodePngGray(bytes);
    baseImage = grayToRgba(gray);
    const b64 = btoa(String.fromCharCode(...bytes));
    session = new ChatSession(client);
    session.setImage(b64, await computeImageId(bytes));
    transcript.replaceChildren();
    canvas.width = gray.width;
    canvas.height = gray.height;
    repaint();
  } catch (err) {
    showError(`cannot load image: ${(err as Error).message}`);
  }
});

function repaint(): void {
  if (!baseImage) return;
  const { spans, toggles } = session.latestSpans();
  const composed = renderOverlay(baseImage, spans, toggles);
  const ctx = canvas.getContext('2d');
  if (!ctx) return;
  const frame = new ImageData(composed.width, composed.height);
  frame.data.set(composed.data);
  ctx.putImageData(frame, 0, 0);
}

function appendTurnBubbles(): void {
  transcript.replaceChildren();
  session.turns.forEach((turn, turnIndex) => {
    const bubble = document.createElement('div');
    bubble.className = `bubble ${turn.role}`;
    const text = document.createElement('p');
    text.textContent = turn.text;
    bubble.appendChild(text);
    turn.spans.forEach((span, slot) => {
      const label = document.createElement('label');
      label.className = 'slot-toggle';
      const box = document.createElement('input');
      box.type = 'checkbox';
      box.checked = turn.toggles[slot];
      box.addEventListener('change', () => {
        session.toggleSlot(turnIndex, slot, box.checked);
        repaint();
      });
      const swatch = document.createElement('span');
      swatch.className = 'swatch';
      swatch.style.backgroundColor = cssColor(colorForSlot(span.slotIndex));
      label.append(box, swatch,
        ` ${span.phrase || `slot ${span.slotIndex}`} (${span.areaPx} px)`);
      bubble.appendChild(label);
    });
    transcript.appendChild(bubble);
  });
  transcript.scrollTop = transcript.scrollHeight;
}

sendButton.addEventListener('click', async () => {
  const message = messageInput.value.trim();
  if (!message) return;
  if (!session.hasImage) {
    showError('upload an image first');
    return;
  }
  sendButton.disabled = true;
  try {
    await session.sendTurn(message);
    messageInput.value = '';
    appendTurnBubbles();
    repaint();
  } catch (err) {
    showError(err instanceof ApiError
      ? `server error ${err.status || ''}: ${err.message}`
      : (err as Error).message);
  } finally {
    sendButton.disabled = false;
  }
});

messageInput.addEventListener('keydown', (event) => {
  if (event.key === 'Enter' && !sendButton.disabled) sendButton.click();
});

exportButton.addEventListener('click', () => {
  const blob = new Blob([session.exportSession()], { type: 'application/json' });
  const url = URL.createObjectURL(blob);
  const link = document.createElement('a');
  link.href = url;
  link.download = `session-${session.currentImageId || 'empty'}.json`;
  link.click();
  URL.revokeObjectURL(url);
});

void refreshHealth();
setInterval(() => void refreshHealth(), 15_000);
