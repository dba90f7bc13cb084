import assert from 'node:assert/strict';
import { execFileSync } from 'node:child_process';
import { mkdtempSync, readFileSync, writeFileSync } from 'node:fs';
import http from 'node:http';
import { tmpdir } from 'node:os';
import { join } from 'node:path';
import { after, before, test } from 'node:test';

import { ApiError, ChatClient } from '../src/api.js';
import { ChatSession, computeImageId } from '../src/session.js';
import { base64ToBytes } from '../src/maskCodec.js';
import type { ChatRequestPayload, ChatResponsePayload } from '../src/types.js';

const fixturesUrl = new URL('../../tests/fixtures/', import.meta.url);
const fixtures = JSON.parse(
  readFileSync(new URL('chat_fixtures.json', fixturesUrl), 'utf-8'),
) as {
  image_b64: string;
  question: string;
  response_rle: ChatResponsePayload;
  response_png: ChatResponsePayload;
  response_followup: ChatResponsePayload;
};

/** Fixture service: first turn -> grounded two-span reply, later turns ->
 * plain follow-up. ?format=png in the span mask when requested. */
let server: http.Server;
let baseUrl = '';
const seenRequests: ChatRequestPayload[] = [];

before(async () => {
  server = http.createServer((req, res) => {
    if (req.method === 'GET' && req.url === '/healthz') {
      res.writeHead(200, { 'Content-Type': 'application/json' });
      res.end(JSON.stringify({ status: 'ok', model_version: 'fixture/1' }));
      return;
    }
    if (req.method === 'POST' && req.url === '/v1/chat') {
      let body = '';
      req.on('data', (chunk) => { body += chunk; });
      req.on('end', () => {
        const payload = JSON.parse(body) as ChatRequestPayload;
        seenRequests.push(payload);
        if (payload.message === 'trigger-422') {
          res.writeHead(422, { 'Content-Type': 'application/json' });
          res.end(JSON.stringify({ error: 'sequence budget exceeded' }));
          return;
        }
        let reply: ChatResponsePayload;
        if (payload.history.length === 0) {
          reply = payload.options?.mask_format === 'png_base64'
            ? fixtures.response_png
            : fixtures.response_rle;
        } else {
          reply = fixtures.response_followup;
        }
        res.writeHead(200, { 'Content-Type': 'application/json' });
        res.end(JSON.stringify(reply));
      });
      return;
    }
    res.writeHead(404, { 'Content-Type': 'application/json' });
    res.end(JSON.stringify({ error: 'not found' }));
  });
  await new Promise<void>((resolve) => server.listen(0, '127.0.0.1', resolve));
  const address = server.address();
  if (address === null || typeof address === 'string') throw new Error('no port');
  baseUrl = `http://127.0.0.1:${address.port}`;
});

after(() => server.close());

async function freshSession(): Promise<ChatSession> {
  const session = new ChatSession(new ChatClient(baseUrl));
  const bytes = base64ToBytes(fixtures.image_b64);
  session.setImage(fixtures.image_b64, await computeImageId(bytes));
  return session;
}

test('health endpoint reachable through the client', async () => {
  const client = new ChatClient(baseUrl);
  const health = await client.health();
  assert.equal(health.status, 'ok');
});

test('sendTurn decodes one overlay bitmap per span', async () => {
  const session = await freshSession();
  const turn = await session.sendTurn(fixtures.question, 'rle');
  assert.equal(turn.spans.length, fixtures.response_rle.spans.length);
  assert.equal(turn.spans.length, (turn.text.match(/\[SEG\]/g) ?? []).length);
  for (const span of turn.spans) {
    assert.equal(span.mask.width, 32);
    assert.equal(span.mask.height, 32);
    const area = span.mask.data.reduce((n: number, v: number) => n + v, 0);
    assert.equal(area, span.areaPx);
  }
  assert.deepEqual(turn.toggles, [true, true]);
});

test('png and rle responses produce identical span bitmaps', async () => {
  const a = await freshSession();
  const rleTurn = await a.sendTurn(fixtures.question, 'rle');
  const b = await freshSession();
  const pngTurn = await b.sendTurn(fixtures.question, 'png_base64');
  for (let k = 0; k < rleTurn.spans.length; k++) {
    assert.deepEqual(
      Array.from(pngTurn.spans[k].mask.data),
      Array.from(rleTurn.spans[k].mask.data),
    );
  }
});

test('history sent equals the rendered transcript', async () => {
  const session = await freshSession();
  await session.sendTurn(fixtures.question);
  seenRequests.length = 0;
  await session.sendTurn('Is any follow-up needed?');
  assert.equal(seenRequests.length, 1);
  assert.deepEqual(seenRequests[0].history, [
    { role: 'user', text: fixtures.question },
    { role: 'assistant', text: fixtures.response_rle.text },
  ]);
  assert.equal(session.turns.length, 4);
});

test('zero-slot answers change no overlays', async () => {
  const session = await freshSession();
  await session.sendTurn(fixtures.question);
  const before = session.latestSpans();
  assert.equal(before.spans.length, 2);
  await session.sendTurn('Is any follow-up needed?');
  const latest = session.latestSpans();
  assert.equal(latest.spans.length, 0);
});

test('server errors surface and leave state unchanged', async () => {
  const session = await freshSession();
  await assert.rejects(() => session.sendTurn('trigger-422'), (err: unknown) => {
    assert.ok(err instanceof ApiError);
    assert.equal(err.status, 422);
    return true;
  });
  assert.equal(session.turns.length, 0);
  assert.equal(session.busy, false);
});

test('toggleSlot flips one slot only', async () => {
  const session = await freshSession();
  await session.sendTurn(fixtures.question);
  session.toggleSlot(1, 0);
  assert.deepEqual(session.turns[1].toggles, [false, true]);
  session.toggleSlot(1, 0, true);
  assert.deepEqual(session.turns[1].toggles, [true, true]);
  assert.throws(() => session.toggleSlot(1, 9));
});

test('export is byte-stable and matches the record shape', async () => {
  const session = await freshSession();
  await session.sendTurn(fixtures.question);
  const one = session.exportSession();
  const two = session.exportSession();
  assert.equal(one, two);
  const doc = JSON.parse(one);
  assert.equal(typeof doc.image_id, 'string');
  assert.equal(doc.turns.length, 2);
  assert.equal(doc.turns[1].spans.length, 2);
});

test('empty session still exports minimal valid JSON', async () => {
  const session = new ChatSession(new ChatClient(baseUrl));
  const doc = JSON.parse(session.exportSession());
  assert.deepEqual(doc.turns, []);
});

test('exported session passes the dataset validator', async () => {
  const session = await freshSession();
  await session.sendTurn(fixtures.question);
  await session.sendTurn('Is any follow-up needed?');
  const dir = mkdtempSync(join(tmpdir(), 'session-'));
  const path = join(dir, 'export.json');
  writeFileSync(path, session.exportSession());
  const out = execFileSync(
    'python3', ['-m', 'medseg.cli', 'validate', '--session', path],
    { encoding: 'utf-8' },
  );
  assert.match(out, /session ok/);
});

test('requests time out through the abort signal', async () => {
  const client = new ChatClient(baseUrl, fetch, 50);
  const stuck = http.createServer(() => { /* never responds */ });
  await new Promise<void>((resolve) => stuck.listen(0, '127.0.0.1', resolve));
  const address = stuck.address();
  if (address === null || typeof address === 'string') throw new Error('no port');
  const slowClient = new ChatClient(`http://127.0.0.1:${address.port}`, fetch, 50);
  try {
    await assert.rejects(() => slowClient.health(), (err: unknown) => {
      assert.ok(err instanceof ApiError);
      assert.match(err.message, /timed out/);
      return true;
    });
  } finally {
    stuck.close();
  }
  void client;
});
