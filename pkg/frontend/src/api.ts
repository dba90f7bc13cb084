/** Thin fetch client for the inference service. */

import type {
  ChatRequestPayload,
  ChatResponsePayload,
  HealthPayload,
} from './types.js';

export const REQUEST_TIMEOUT_MS = 30_000;

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = 'ApiError';
  }
}

export class ChatClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
    private readonly timeoutMs: number = REQUEST_TIMEOUT_MS,
  ) {}

  async health(): Promise<HealthPayload> {
    const response = await this.request('/healthz', undefined);
    return response as HealthPayload;
  }

  async chat(payload: ChatRequestPayload): Promise<ChatResponsePayload> {
    const response = await this.request('/v1/chat', payload);
    return response as ChatResponsePayload;
  }

  private async request(path: string, body: object | undefined): Promise<unknown> {
    const controller = new AbortController();
    const timer = setTimeout(() => controller.abort(), this.timeoutMs);
    try {
      const response = await this.fetchImpl(`${this.baseUrl}${path}`, {
        method: body === undefined ? 'GET' : 'POST',
        headers: body === undefined ? undefined : { 'Content-Type': 'application/json' },
        body: body === undefined ? undefined : JSON.stringify(body),
        signal: controller.signal,
      });
      let parsed: unknown = null;
      try {
        parsed = await response.json();
      } catch {
        parsed = null;
      }
      if (!response.ok) {
        const detail = (parsed as { error?: string } | null)?.error ?? response.statusText;
        throw new ApiError(response.status, detail);
      }
      return parsed;
    } catch (err) {
      if (err instanceof ApiError) throw err;
      if ((err as Error).name === 'AbortError') {
        throw new ApiError(0, `request timed out after ${this.timeoutMs} ms`);
      }
      throw new ApiError(0, (err as Error).message);
    } finally {
      clearTimeout(timer);
    }
  }
}
