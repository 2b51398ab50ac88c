// Clicks made while the service is unreachable are kept in order and
// flushed on reconnect; the user never loses work to a blip.

import type { Click } from './api';

export class ClickQueue {
  private pending: Click[] = [];

  get size(): number {
    return this.pending.length;
  }

  push(click: Click): void {
    this.pending.push(click);
  }

  /**
   * Post queued clicks oldest-first. Stops at the first failure and keeps
   * the remainder queued; returns how many were delivered.
   */
  async flush(post: (click: Click) => Promise<unknown>): Promise<number> {
    let sent = 0;
    while (this.pending.length > 0) {
      try {
        await post(this.pending[0]);
      } catch {
        break;
      }
      this.pending.shift();
      sent += 1;
    }
    return sent;
  }
}
