// Minimal server-sent-events client over fetch streaming. EventSource
// is avoided so the same code runs in the browser and under vitest.

export interface SseEvent {
  event: string;
  data: string;
}

/** Incremental text/event-stream parser; feed() returns completed events. */
export class SseParser {
  private buffer = '';

  feed(chunk: string): SseEvent[] {
    this.buffer += chunk.replace(/\r\n/g, '\n');
    const events: SseEvent[] = [];
    let cut: number;
    while ((cut = this.buffer.indexOf('\n\n')) !== -1) {
      const block = this.buffer.slice(0, cut);
      this.buffer = this.buffer.slice(cut + 2);
      let event = 'message';
      const data: string[] = [];
      for (const line of block.split('\n')) {
        if (line.startsWith('event:')) event = line.slice(6).trim();
        else if (line.startsWith('data:')) data.push(line.slice(5).trimStart());
        // comments (:) and unknown fields are ignored per the SSE spec
      }
      if (data.length > 0) events.push({ event, data: data.join('\n') });
    }
    return events;
  }
}

export interface SseClientOptions {
  onEvent: (ev: SseEvent) => void;
  onOpen?: () => void;
  onError?: (err: unknown) => void;
  retryMs?: number;
}

/** Long-lived subscription with automatic reconnect. */
export class SseClient {
  private controller: AbortController | null = null;
  private stopped = false;

  constructor(
    readonly url: string,
    readonly opts: SseClientOptions,
  ) {}

  start(): void {
    this.stopped = false;
    void this.loop();
  }

  private async loop(): Promise<void> {
    while (!this.stopped) {
      this.controller = new AbortController();
      try {
        const r = await fetch(this.url, {
          headers: { accept: 'text/event-stream' },
          signal: this.controller.signal,
        });
        if (!r.ok || !r.body) throw new Error(`event stream: ${r.status}`);
        this.opts.onOpen?.();
        const reader = r.body.getReader();
        const decoder = new TextDecoder();
        const parser = new SseParser();
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          for (const ev of parser.feed(decoder.decode(value, { stream: true }))) {
            this.opts.onEvent(ev);
          }
        }
      } catch (err) {
        if (this.stopped) return;
        this.opts.onError?.(err);
      }
      if (this.stopped) return;
      await new Promise((resolve) => setTimeout(resolve, this.opts.retryMs ?? 1000));
    }
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
  }
}
