// @vitest-environment jsdom
// End-to-end against a live service: real HTTP, real SSE, real training.
// The UI is driven the way a person would: palette/tree buttons and canvas
// MouseEvents, never direct service calls.
import { spawn, type ChildProcess } from 'node:child_process';
import { PNG } from 'pngjs';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';

import { createApp, type App } from '../src/app';
import { pixelAt, type Raster } from '../src/raster';

const FLAT_PORT = 8741;
const HIER_PORT = 8742;

// Interior pixels of each demo-room object at 64x48, frame 0, with the
// class colour the server assigns in creation order.
const FIXTURES = [
  { name: 'floor', u: 39, v: 35, colour: [230, 25, 75] },
  { name: 'wall', u: 32, v: 7, colour: [60, 180, 75] },
  { name: 'box', u: 15, v: 27, colour: [255, 225, 25] },
  { name: 'sphere', u: 43, v: 19, colour: [0, 130, 200] },
] as const;

const ZOOM = 10; // CSS pixels per image pixel in the pinned layout

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function until(cond: () => boolean | Promise<boolean>, what: string, ms = 60_000): Promise<void> {
  const t0 = Date.now();
  while (!(await cond())) {
    if (Date.now() - t0 > ms) throw new Error(`timed out waiting for ${what}`);
    await sleep(100);
  }
}

function serve(port: number, mode: 'flat' | 'hierarchical'): ChildProcess {
  return spawn(
    'python3',
    ['-m', 'labelfield.cli', 'serve', '--port', String(port), '--scene', 'demo',
     '--width', '64', '--height', '48', '--n-frames', '2', '--seed', '0', '--mode', mode],
    { stdio: 'ignore' },
  );
}

async function waitForServer(base: string): Promise<void> {
  await until(async () => {
    try {
      return (await fetch(`${base}/keyframes`)).ok;
    } catch {
      return false;
    }
  }, `server at ${base}`, 90_000);
}

async function stopServer(proc: ChildProcess | undefined): Promise<void> {
  if (proc === undefined || proc.exitCode !== null) return;
  const gone = new Promise<void>((resolve) => proc.once('exit', () => resolve()));
  proc.kill('SIGTERM');
  await Promise.race([gone, sleep(5000).then(() => proc.kill('SIGKILL'))]);
}

async function decodePng(bytes: ArrayBuffer): Promise<Raster> {
  const png = PNG.sync.read(Buffer.from(bytes));
  const data = new Uint8ClampedArray(png.data.length);
  data.set(png.data);
  return { width: png.width, height: png.height, data };
}

function layout(canvas: HTMLCanvasElement, width: number, height: number): void {
  canvas.getBoundingClientRect = () =>
    ({ left: 0, top: 0, width, height, right: width, bottom: height, x: 0, y: 0 }) as DOMRect;
}

function clickCanvas(app: App, u: number, v: number): void {
  app.viewer.canvas.dispatchEvent(
    new MouseEvent('click', { clientX: (u + 0.5) * ZOOM, clientY: (v + 0.5) * ZOOM }),
  );
}

async function stat(base: string, field: string): Promise<number> {
  const body = (await (await fetch(`${base}/stats`)).json()) as Record<string, number>;
  return body[field];
}

describe('flat round-trip', () => {
  const base = `http://127.0.0.1:${FLAT_PORT}`;
  let proc: ChildProcess;
  let app: App;
  let root: HTMLElement;

  beforeAll(async () => {
    proc = serve(FLAT_PORT, 'flat');
    await waitForServer(base);
    document.body.innerHTML = '<div id="app"></div>';
    root = document.querySelector<HTMLElement>('#app')!;
    // the test drives refresh() itself so raster assertions are not racy
    app = await createApp(root, base, { decodePng, autoRefreshMs: 0 });
    layout(app.viewer.canvas, 64 * ZOOM, 48 * ZOOM);
  });

  afterAll(async () => {
    app?.dispose();
    await stopServer(proc);
  });

  it('creates the four classes through the palette form', async () => {
    const input = root.querySelector<HTMLInputElement>('.palette-slot input[name=name]')!;
    const form = root.querySelector<HTMLFormElement>('.palette-slot form.add-class')!;
    for (const f of FIXTURES) {
      input.value = f.name;
      form.dispatchEvent(new Event('submit', { bubbles: true, cancelable: true }));
      await until(
        () => app.schemaView().flatClasses.some((c) => c.name === f.name),
        `class ${f.name} in the schema`,
      );
    }
    const classes = app.schemaView().flatClasses;
    expect(classes.map((c) => c.name)).toEqual(['floor', 'wall', 'box', 'sphere']);
    for (const [i, f] of FIXTURES.entries()) {
      expect(classes[i].colour).toEqual(f.colour);
    }
  });

  it('propagates one click per object to the overlay pixels', async () => {
    // let the field settle geometry before labelling starts
    await until(async () => (await stat(base, 'steps')) >= 400, 'field warm-up', 180_000);

    for (const [i, f] of FIXTURES.entries()) {
      root.querySelector<HTMLElement>(`.palette-slot button[data-class-id="${i}"]`)!.click();
      clickCanvas(app, f.u, f.v);
      await until(async () => (await stat(base, 'annotations')) >= i + 1, `click ${f.name} stored`);
    }
    const markers = root.querySelectorAll('.click-marker');
    expect(markers).toHaveLength(FIXTURES.length);

    // full-strength semantics so the asserted pixel is exactly the class colour
    const opacity = root.querySelector<HTMLInputElement>('input[name=opacity]')!;
    opacity.value = '1';
    opacity.dispatchEvent(new Event('input', { bubbles: true }));

    await app.waitForSnapshots(2);
    const deadline = Date.now() + 180_000;
    let got: Record<string, number[]> = {};
    for (;;) {
      await app.refresh();
      const raster = app.viewer.currentRaster!;
      got = Object.fromEntries(FIXTURES.map((f) => [f.name, pixelAt(raster, f.u, f.v)]));
      if (FIXTURES.every((f) => got[f.name].every((c, k) => c === f.colour[k]))) break;
      if (Date.now() > deadline) break;
      await app.waitForSnapshots(2);
    }
    for (const f of FIXTURES) {
      expect(got[f.name], `overlay pixel under the ${f.name} click`).toEqual([...f.colour]);
    }
  });
});

describe('hierarchical round-trip', () => {
  const base = `http://127.0.0.1:${HIER_PORT}`;
  let proc: ChildProcess;
  let app: App;
  let root: HTMLElement;

  beforeAll(async () => {
    proc = serve(HIER_PORT, 'hierarchical');
    await waitForServer(base);
    document.body.innerHTML = '<div id="app"></div>';
    root = document.querySelector<HTMLElement>('#app')!;
    app = await createApp(root, base, { decodePng, autoRefreshMs: 0 });
    layout(app.viewer.canvas, 64 * ZOOM, 48 * ZOOM);
  });

  afterAll(async () => {
    app?.dispose();
    await stopServer(proc);
  });

  function nodeButton(path: string): HTMLElement {
    return root.querySelector<HTMLElement>(`.tree-slot button.node[data-path="${path}"]`)!;
  }

  async function addNode(parent: string | null, branch: 0 | 1, name: string): Promise<void> {
    // steer the editor's active node: re-clicking the active row clears it
    const active = app.tree.activePath;
    if (parent === null) {
      if (active !== null) nodeButton(active).click();
    } else if (active !== parent) {
      nodeButton(parent).click();
    }
    const input = root.querySelector<HTMLInputElement>('.tree-slot input[name=name]')!;
    input.value = name;
    root.querySelector<HTMLElement>(`.tree-slot button[data-branch="${branch}"]`)!.click();
    const path = (parent ?? '') + String(branch);
    await until(() => app.schemaView().pathColour.has(path), `node ${path} in the schema`);
  }

  it('builds a three-level hierarchy in the tree editor', async () => {
    await addNode(null, 0, 'background');
    await addNode(null, 1, 'foreground');
    await addNode('0', 0, 'wall');
    await addNode('0', 1, 'floor');
    await addNode('00', 0, 'brick');
    await addNode('00', 1, 'plaster');
    const paths = app.schemaView().nodes.map((n) => n.path);
    expect(paths).toEqual(['0', '00', '000', '001', '01', '1']);
    expect(app.schemaView().maxDepth).toBe(3);
  });

  it('switches legend palettes with the level slider without errors', async () => {
    const slider = root.querySelector<HTMLInputElement>('.tree-slot input[name=level]')!;
    expect(slider.max).toBe('3');
    const legends: Record<number, string[]> = {};
    for (const level of [1, 2, 3, 1]) {
      slider.value = String(level);
      slider.dispatchEvent(new Event('input', { bubbles: true }));
      await app.refresh();
      legends[level] = [...root.querySelectorAll<HTMLElement>('.legend-entry')].map(
        (el) => el.dataset.path!,
      );
      expect(app.tree.displayLevel).toBe(level);
    }
    expect(legends[1]).toEqual(['0', '1']);
    expect(legends[2]).toEqual(['00', '01', '1']);
    expect(legends[3]).toEqual(['000', '001', '01', '1']);
    expect(app.notices.messages).toEqual([]);
  });

  it('accepts a path-labelled click from the canvas', async () => {
    root.querySelector<HTMLElement>('.tree-slot button.node[data-path="01"]')!.click();
    clickCanvas(app, FIXTURES[0].u, FIXTURES[0].v);
    await until(async () => (await stat(base, 'annotations')) >= 1, 'hierarchical click stored');
    expect(app.notices.messages).toEqual([]);
  });
});
