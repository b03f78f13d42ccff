import { describe, expect, it, vi } from 'vitest';

import { ApiClient, ApiError, LeaseExpiredError } from '../src/api.js';
import { parsePgm } from '../src/pgm.js';

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { 'content-type': 'application/json' },
  });
}

describe('ApiClient', () => {
  it('nextTask returns null on 204', async () => {
    const fetchFn = vi.fn(async () => new Response(null, { status: 204 }));
    const api = new ApiClient('', fetchFn as unknown as typeof fetch);
    expect(await api.nextTask('ann1')).toBeNull();
    expect(fetchFn).toHaveBeenCalledWith('/api/v1/tasks/next?annotator=ann1', undefined);
  });

  it('nextTask decodes a task payload', async () => {
    const task = {
      task_id: 't1', item_id: 'i1', image_url: '/api/v1/images/i1',
      kind: 'verify', annotator: 'ann1', proposed_label: 'x',
    };
    const api = new ApiClient('', (async () => jsonResponse(task)) as typeof fetch);
    expect(await api.nextTask('ann1')).toEqual(task);
  });

  it('submitLabel posts the label body once', async () => {
    const fetchFn = vi.fn(async () => jsonResponse({ status: 'pending' }));
    const api = new ApiClient('', fetchFn as unknown as typeof fetch);
    const result = await api.submitLabel('t1', 'LEER');
    expect(result).toEqual({ status: 'pending' });
    expect(fetchFn).toHaveBeenCalledTimes(1);
    const [url, init] = fetchFn.mock.calls[0] as [string, RequestInit];
    expect(url).toBe('/api/v1/tasks/t1/label');
    expect(init.method).toBe('POST');
    expect(JSON.parse(init.body as string)).toEqual({ label: 'LEER' });
  });

  it('submitLabel surfaces 409 as LeaseExpiredError', async () => {
    const api = new ApiClient(
      '', (async () => jsonResponse({ detail: 'gone' }, 409)) as typeof fetch);
    await expect(api.submitLabel('t1', 'x')).rejects.toBeInstanceOf(LeaseExpiredError);
  });

  it('other failures carry the HTTP status', async () => {
    const api = new ApiClient(
      '', (async () => jsonResponse({ detail: 'nope' }, 404)) as typeof fetch);
    await expect(api.submitLabel('t1', 'x')).rejects.toMatchObject({ status: 404 });
    const api500 = new ApiClient(
      '', (async () => new Response('boom', { status: 500 })) as typeof fetch);
    await expect(api500.metrics()).rejects.toBeInstanceOf(ApiError);
  });
});

describe('parsePgm', () => {
  function pgmBytes(header: string, pixels: number[]): Uint8Array {
    const head = new TextEncoder().encode(header);
    const out = new Uint8Array(head.length + pixels.length);
    out.set(head);
    out.set(pixels, head.length);
    return out;
  }

  it('parses header and pixel data', () => {
    const image = parsePgm(pgmBytes('P5\n3 2\n255\n', [0, 50, 100, 150, 200, 250]));
    expect(image.width).toBe(3);
    expect(image.height).toBe(2);
    expect(Array.from(image.pixels)).toEqual([0, 50, 100, 150, 200, 250]);
  });

  it('skips header comments', () => {
    const image = parsePgm(pgmBytes('P5\n# made by tests\n2 1\n255\n', [7, 9]));
    expect(image.width).toBe(2);
    expect(Array.from(image.pixels)).toEqual([7, 9]);
  });

  it('rejects non-P5 payloads', () => {
    expect(() => parsePgm(new TextEncoder().encode('P2\n1 1\n255\n0'))).toThrow(/P5/);
  });

  it('rejects truncated data', () => {
    expect(() => parsePgm(pgmBytes('P5\n4 4\n255\n', [1, 2, 3]))).toThrow(/truncated/);
  });
});
