import { describe, expect, it } from 'vitest';

import type { Click } from '../src/api';
import { ClickQueue } from '../src/queue';

function click(u: number): Click {
  return { frame_id: 0, u, v: 0, label: 1 };
}

describe('ClickQueue', () => {
  it('flushes oldest-first and empties on success', async () => {
    const q = new ClickQueue();
    q.push(click(1));
    q.push(click(2));
    const seen: number[] = [];
    const sent = await q.flush(async (c) => {
      seen.push(c.u);
    });
    expect(sent).toBe(2);
    expect(seen).toEqual([1, 2]);
    expect(q.size).toBe(0);
  });

  it('stops at the first failure and keeps the remainder', async () => {
    const q = new ClickQueue();
    q.push(click(1));
    q.push(click(2));
    q.push(click(3));
    let calls = 0;
    const sent = await q.flush(async () => {
      calls += 1;
      if (calls === 2) throw new Error('down');
    });
    expect(sent).toBe(1);
    expect(q.size).toBe(2);
    // the failed click is retried on the next flush, not dropped
    const retried: number[] = [];
    await q.flush(async (c) => {
      retried.push(c.u);
    });
    expect(retried).toEqual([2, 3]);
  });

  it('flushing an empty queue is a no-op', async () => {
    const q = new ClickQueue();
    expect(await q.flush(async () => {})).toBe(0);
  });
});
