// Wires the service client to the UI components. createApp() returns a
// handle the browser entrypoint and the tests share: every behaviour is
// driven through the same DOM and the same service calls.

import { Api, ServiceError, type KeyframeInfo, type PreviewKind, type QueryProposal } from './api';
import { ClickQueue } from './queue';
import { blendOverlay, remapToLevel, type Raster } from './raster';
import { buildSchemaView, isValidLabel, type SchemaView } from './schema';
import { SseClient } from './sse';
import { clampOpacity, initialState, type ViewState } from './state';
import { Notices } from './ui/notices';
import { Palette } from './ui/palette';
import { TreeEditor } from './ui/tree';
import { Viewer } from './ui/viewer';

export interface AppOptions {
  decodePng: (bytes: ArrayBuffer) => Promise<Raster>;
  /** 0 disables the snapshot-driven auto refresh (tests drive refresh()). */
  autoRefreshMs?: number;
  meshPollMs?: number;
}

export interface App {
  state: ViewState;
  api: Api;
  viewer: Viewer;
  palette: Palette;
  tree: TreeEditor;
  notices: Notices;
  schemaView: () => SchemaView;
  refresh: () => Promise<void>;
  reloadSchema: () => Promise<void>;
  waitForSnapshots: (n: number) => Promise<void>;
  dispose: () => void;
}

const SKELETON = `
  <header>
    <nav class="frames"></nav>
    <label>view
      <select name="kind">
        <option value="overlay">overlay</option>
        <option value="colour">colour</option>
        <option value="semantics">semantics</option>
        <option value="depth">depth</option>
        <option value="uncertainty">uncertainty</option>
      </select>
    </label>
    <label>opacity <input type="range" name="opacity" min="0" max="1" step="0.05" value="0.5" /></label>
    <span class="status" data-connected="false">offline</span>
  </header>
  <main>
    <div class="viewer-slot"></div>
    <aside>
      <div class="palette-slot"></div>
      <div class="tree-slot"></div>
      <section class="query-panel" hidden>
        <p class="prompt"></p>
        <input type="text" name="answer" placeholder="label" autocomplete="off" />
        <button type="button" class="answer">answer</button>
        <button type="button" class="suggest">suggest</button>
      </section>
      <section class="mesh-panel">
        <label>resolution <input type="number" name="resolution" value="64" min="8" max="256" /></label>
        <button type="button" class="export">export mesh</button>
        <span class="mesh-status"></span>
      </section>
      <div class="notices-slot"></div>
      <footer class="stats"></footer>
    </aside>
  </main>
`;

export async function createApp(root: HTMLElement, base: string, opts: AppOptions): Promise<App> {
  const api = new Api(base);
  const state = initialState();
  root.innerHTML = SKELETON;
  root.classList.add('labelfield-app');

  const viewer = new Viewer(root.querySelector<HTMLElement>('.viewer-slot')!);
  const palette = new Palette(root.querySelector<HTMLElement>('.palette-slot')!);
  const tree = new TreeEditor(root.querySelector<HTMLElement>('.tree-slot')!);
  const notices = new Notices(root.querySelector<HTMLElement>('.notices-slot')!);
  const queue = new ClickQueue();

  let frames: KeyframeInfo[] = [];
  let view: SchemaView = buildSchemaView({ mode: 'flat', classes: [] });
  let cachedColour: Raster | null = null;
  let cachedSemantics: Raster | null = null;
  let refreshing = false;
  let dirty = false;
  let lastRefresh = 0;
  const snapshotWaiters: { left: number; resolve: () => void }[] = [];

  const statusEl = root.querySelector<HTMLElement>('.status')!;
  const statsEl = root.querySelector<HTMLElement>('.stats')!;
  const queryPanel = root.querySelector<HTMLElement>('.query-panel')!;

  function notifyError(err: unknown): void {
    notices.push(err instanceof Error ? err.message : String(err));
  }

  function setConnected(on: boolean): void {
    state.connected = on;
    statusEl.dataset.connected = String(on);
    statusEl.textContent = on ? 'live' : 'offline';
    if (on && queue.size > 0) {
      void queue.flush((c) => api.postClick(c)).then((sent) => {
        if (sent > 0) notices.push(`flushed ${sent} queued click(s)`);
      });
    }
  }

  function composeOverlay(): void {
    if (cachedColour === null || cachedSemantics === null) return;
    let semantics = cachedSemantics;
    if (view.mode === 'hierarchical' && state.level < view.maxDepth) {
      semantics = remapToLevel(semantics, view.colourToPath, view.pathColour, state.level);
    }
    viewer.setRaster(blendOverlay(cachedColour, semantics, state.opacity));
  }

  async function refresh(): Promise<void> {
    if (refreshing) {
      dirty = true;
      return;
    }
    refreshing = true;
    try {
      if (state.kind === 'overlay') {
        const [colour, semantics] = await Promise.all([
          api.preview(state.frameId, 'colour'),
          api.preview(state.frameId, 'semantics'),
        ]);
        cachedColour = await opts.decodePng(colour.bytes);
        cachedSemantics = await opts.decodePng(semantics.bytes);
        composeOverlay();
      } else {
        const png = await api.preview(state.frameId, state.kind);
        viewer.setRaster(await opts.decodePng(png.bytes));
      }
      lastRefresh = Date.now();
    } catch (err) {
      if (!(err instanceof ServiceError)) setConnected(false);
      notifyError(err);
    } finally {
      refreshing = false;
      if (dirty) {
        dirty = false;
        void refresh();
      }
    }
  }

  async function reloadSchema(): Promise<void> {
    view = buildSchemaView(await api.schema());
    if (view.mode === 'flat') {
      palette.setClasses(view.flatClasses);
      tree.root.hidden = true;
      if (state.activeLabel === null) state.activeLabel = palette.activeClass;
    } else {
      tree.setView(view);
      palette.root.hidden = true;
      if (state.activeLabel === null) state.activeLabel = tree.activePath;
    }
    if (state.activeLabel !== null && !isValidLabel(view, state.activeLabel)) {
      state.activeLabel = null;
    }
  }

  function selectFrame(frameId: number): void {
    const frame = frames.find((f) => f.frame_id === frameId);
    if (frame === undefined) return;
    state.frameId = frameId;
    viewer.setFrameSize(frame.width, frame.height);
    root.querySelectorAll<HTMLElement>('.frames button').forEach((b) => {
      b.classList.toggle('active', Number(b.dataset.frameId) === frameId);
    });
    showCrosshairIfLocal();
    void refresh();
  }

  function showCrosshairIfLocal(): void {
    const q = state.pendingQuery;
    if (q !== null && q.frame_id === state.frameId) viewer.showCrosshair(q.u, q.v);
    else viewer.hideCrosshair();
  }

  function showQuery(q: QueryProposal): void {
    state.pendingQuery = q;
    queryPanel.hidden = false;
    queryPanel.querySelector('.prompt')!.textContent =
      `label frame ${q.frame_id} pixel (${q.u}, ${q.v})? ${q.measure}=${q.value.toFixed(3)}`;
    showCrosshairIfLocal();
  }

  function clearQuery(): void {
    state.pendingQuery = null;
    queryPanel.hidden = true;
    viewer.hideCrosshair();
  }

  async function submitClick(u: number, v: number): Promise<void> {
    if (state.activeLabel === null) {
      notices.push('pick a class first');
      return;
    }
    const click = { frame_id: state.frameId, u, v, label: state.activeLabel };
    const colour =
      view.mode === 'flat'
        ? palette.colourOf(click.label as number)
        : `rgb(${(view.pathColour.get(click.label as string) ?? [255, 255, 255]).join(', ')})`;
    viewer.addMarker(u, v, colour);
    if (!state.connected) {
      queue.push(click);
      return;
    }
    try {
      await api.postClick(click);
    } catch (err) {
      if (err instanceof ServiceError) notifyError(err);
      else {
        setConnected(false);
        queue.push(click);
      }
    }
  }

  // -- boot --------------------------------------------------------------

  const listing = await api.keyframes();
  frames = listing.frames;
  const nav = root.querySelector<HTMLElement>('.frames')!;
  nav.replaceChildren(
    ...frames.map((f) => {
      const b = document.createElement('button');
      b.type = 'button';
      b.dataset.frameId = String(f.frame_id);
      b.textContent = `frame ${f.frame_id}`;
      b.addEventListener('click', () => selectFrame(f.frame_id));
      return b;
    }),
  );
  await reloadSchema();

  palette.onSelect((id) => {
    state.activeLabel = id;
  });
  palette.onCreate((name) => {
    void api
      .defineClasses([name])
      .then(() => reloadSchema())
      .catch(notifyError);
  });
  tree.onSelect((path) => {
    state.activeLabel = path;
  });
  tree.onAdd((path, name) => {
    void api
      .defineNodes([{ path, name }])
      .then(() => reloadSchema())
      .catch(notifyError);
  });
  tree.onLevel((level) => {
    state.level = level;
    composeOverlay();
  });
  viewer.onClick(({ u, v }) => void submitClick(u, v));

  const kindSelect = root.querySelector<HTMLSelectElement>('select[name=kind]')!;
  kindSelect.addEventListener('change', () => {
    state.kind = kindSelect.value as PreviewKind;
    void refresh();
  });
  const opacitySlider = root.querySelector<HTMLInputElement>('input[name=opacity]')!;
  opacitySlider.addEventListener('input', () => {
    state.opacity = clampOpacity(Number(opacitySlider.value));
    composeOverlay();
  });

  queryPanel.querySelector('.suggest')!.addEventListener('click', () => {
    api.nextQuery().then(showQuery).catch(notifyError);
  });
  queryPanel.querySelector('.answer')!.addEventListener('click', () => {
    const input = queryPanel.querySelector<HTMLInputElement>('input[name=answer]')!;
    const text = input.value.trim();
    if (text === '' || state.pendingQuery === null) return;
    const label = view.mode === 'flat' && /^\d+$/.test(text) ? Number(text) : text;
    api
      .answerQuery(label)
      .then(() => {
        input.value = '';
        clearQuery();
      })
      .catch(notifyError);
  });

  const meshStatus = root.querySelector<HTMLElement>('.mesh-status')!;
  root.querySelector('.mesh-panel .export')!.addEventListener('click', () => {
    const resolution = Number(root.querySelector<HTMLInputElement>('input[name=resolution]')!.value);
    meshStatus.textContent = 'extracting…';
    api
      .startMesh({ resolution })
      .then(async ({ job_id }) => {
        for (;;) {
          const blob = await api.fetchMesh(job_id);
          if (blob !== null) {
            const link = document.createElement('a');
            link.href = URL.createObjectURL(blob);
            link.download = `labelfield-${job_id}.ply`;
            link.textContent = 'download mesh';
            meshStatus.replaceChildren(link);
            return;
          }
          await new Promise((resolve) => setTimeout(resolve, opts.meshPollMs ?? 1000));
        }
      })
      .catch((err) => {
        meshStatus.textContent = '';
        notifyError(err);
      });
  });

  const sse = new SseClient(api.eventsUrl(), {
    onOpen: () => setConnected(true),
    onError: () => setConnected(false),
    onEvent: (ev) => {
      if (ev.event === 'snapshot') {
        const payload = JSON.parse(ev.data) as { snapshot_version: number; steps: number };
        state.snapshotVersion = payload.snapshot_version;
        statsEl.textContent = `step ${payload.steps} · snapshot ${payload.snapshot_version}`;
        for (const waiter of snapshotWaiters.splice(0)) {
          waiter.left -= 1;
          if (waiter.left > 0) snapshotWaiters.push(waiter);
          else waiter.resolve();
        }
        const interval = opts.autoRefreshMs ?? 1500;
        if (interval > 0 && Date.now() - lastRefresh >= interval) void refresh();
      } else if (ev.event === 'query') {
        showQuery(JSON.parse(ev.data) as QueryProposal);
      }
    },
  });
  sse.start();

  if (frames.length > 0) selectFrame(frames[0].frame_id);

  return {
    state,
    api,
    viewer,
    palette,
    tree,
    notices,
    schemaView: () => view,
    refresh,
    reloadSchema,
    waitForSnapshots: (n: number) =>
      new Promise<void>((resolve) => snapshotWaiters.push({ left: n, resolve })),
    dispose: () => sse.stop(),
  };
}
