// Typed client for the label service. One method per endpoint; errors
// arrive as ServiceError with the server's code/message.

export interface KeyframeInfo {
  frame_id: number;
  width: number;
  height: number;
}

export interface FlatClass {
  id: number;
  name: string;
  colour: [number, number, number];
}

export interface TreeNodeInfo {
  path: string;
  name: string;
  colour: [number, number, number];
}

export type Schema =
  | { mode: 'flat'; classes: FlatClass[] }
  | { mode: 'hierarchical'; max_depth: number; nodes: TreeNodeInfo[] };

export interface QueryProposal {
  frame_id: number;
  u: number;
  v: number;
  value: number;
  measure: string;
}

export interface Stats {
  steps: number;
  annotations: number;
  keyframes: number;
  snapshot_version: number;
  mode: string;
  last_loss: Record<string, number | boolean> | null;
  uptime_seconds: number;
  optimising: boolean;
}

export interface Click {
  frame_id: number;
  u: number;
  v: number;
  label: number | string;
}

export type PreviewKind = 'colour' | 'depth' | 'semantics' | 'uncertainty' | 'overlay';

export interface PreviewPng {
  bytes: ArrayBuffer;
  snapshotVersion: number;
}

export class ServiceError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function raise(r: Response): Promise<never> {
  let code = 'http_error';
  let message = `${r.status} ${r.statusText}`;
  try {
    const body = await r.json();
    if (body?.error) {
      code = body.error.code;
      message = body.error.message;
    }
  } catch {
    // non-JSON error body; keep the status line
  }
  throw new ServiceError(r.status, code, message);
}

export class Api {
  constructor(readonly base: string) {}

  private url(path: string): string {
    return this.base.replace(/\/$/, '') + path;
  }

  private async getJson<T>(path: string): Promise<T> {
    const r = await fetch(this.url(path));
    if (!r.ok) await raise(r);
    return r.json();
  }

  private async send<T>(method: string, path: string, body: unknown): Promise<T> {
    const r = await fetch(this.url(path), {
      method,
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
    if (!r.ok) await raise(r);
    return r.json();
  }

  keyframes(): Promise<{ frames: KeyframeInfo[]; snapshot_version: number }> {
    return this.getJson('/keyframes');
  }

  schema(): Promise<Schema> {
    return this.getJson('/schema');
  }

  defineClasses(names: string[]): Promise<{ added: number[] }> {
    return this.send('PUT', '/schema', { classes: names });
  }

  defineNodes(nodes: { path: string; name: string }[]): Promise<{ added: string[] }> {
    return this.send('PUT', '/schema', { nodes });
  }

  postClick(click: Click): Promise<{ annotations: number }> {
    return this.send('POST', '/clicks', click);
  }

  deleteClick(at: { frame_id: number; u: number; v: number }): Promise<{ removed: boolean }> {
    return this.send('DELETE', '/clicks', at);
  }

  nextQuery(): Promise<QueryProposal> {
    return this.getJson('/query/next');
  }

  answerQuery(label: number | string): Promise<{ annotations: number }> {
    return this.send('POST', '/query/answer', { label });
  }

  startMesh(opts: { resolution?: number; iso?: number; label?: number } = {}): Promise<{ job_id: string }> {
    return this.send('POST', '/mesh', opts);
  }

  /** null while the job is still running. */
  async fetchMesh(jobId: string): Promise<Blob | null> {
    const r = await fetch(this.url(`/mesh/${jobId}`));
    if (r.status === 202) return null;
    if (!r.ok) await raise(r);
    return r.blob();
  }

  stats(): Promise<Stats> {
    return this.getJson('/stats');
  }

  async preview(frameId: number, kind: PreviewKind, stride = 1): Promise<PreviewPng> {
    const r = await fetch(this.url(`/preview/${frameId}?kind=${kind}&stride=${stride}`));
    if (!r.ok) await raise(r);
    const bytes = await r.arrayBuffer();
    return { bytes, snapshotVersion: Number(r.headers.get('x-snapshot-version') ?? -1) };
  }

  eventsUrl(limit?: number): string {
    return this.url(limit === undefined ? '/events' : `/events?limit=${limit}`);
  }
}
