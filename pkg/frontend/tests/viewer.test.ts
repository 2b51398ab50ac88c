// @vitest-environment jsdom
import { beforeEach, describe, expect, it } from 'vitest';

import { makeRaster } from '../src/raster';
import { Viewer } from '../src/ui/viewer';
import type { ViewerClick } from '../src/ui/viewer';

function layout(canvas: HTMLCanvasElement, width: number, height: number): void {
  // jsdom has no layout engine; pin the CSS box the canvas would occupy
  canvas.getBoundingClientRect = () =>
    ({ left: 0, top: 0, width, height, right: width, bottom: height, x: 0, y: 0 }) as DOMRect;
}

describe('Viewer', () => {
  let viewer: Viewer;
  let clicks: ViewerClick[];

  beforeEach(() => {
    document.body.innerHTML = '<div id="slot"></div>';
    viewer = new Viewer(document.querySelector('#slot')!);
    viewer.setFrameSize(64, 48);
    clicks = [];
    viewer.onClick((c) => clicks.push(c));
  });

  it('maps clicks back to native pixels under CSS zoom', () => {
    layout(viewer.canvas, 640, 480); // 10x zoom
    viewer.canvas.dispatchEvent(new MouseEvent('click', { clientX: 395, clientY: 355 }));
    expect(clicks).toEqual([{ u: 39, v: 35 }]);
  });

  it('clamps clicks on the far edge into the frame', () => {
    layout(viewer.canvas, 640, 480);
    viewer.canvas.dispatchEvent(new MouseEvent('click', { clientX: 640, clientY: 480 }));
    expect(clicks).toEqual([{ u: 63, v: 47 }]);
  });

  it('ignores clicks before a frame is sized', () => {
    viewer.setFrameSize(0, 0);
    layout(viewer.canvas, 640, 480);
    viewer.canvas.dispatchEvent(new MouseEvent('click', { clientX: 10, clientY: 10 }));
    expect(clicks).toEqual([]);
  });

  it('keeps the latest raster readable for assertions', () => {
    const r = makeRaster(64, 48);
    r.data.fill(200);
    viewer.setRaster(r);
    expect(viewer.currentRaster).toBe(r);
  });

  it('adds percent-positioned markers and clears them on resize', () => {
    viewer.addMarker(31, 23, 'rgb(1, 2, 3)');
    const marker = viewer.root.querySelector<HTMLElement>('.click-marker')!;
    expect(parseFloat(marker.style.left)).toBeCloseTo(((31 + 0.5) / 64) * 100, 4);
    expect(parseFloat(marker.style.top)).toBeCloseTo(((23 + 0.5) / 48) * 100, 4);
    viewer.setFrameSize(64, 48);
    expect(viewer.root.querySelector('.click-marker')).toBeNull();
  });

  it('shows a single crosshair at a time', () => {
    viewer.showCrosshair(10, 10);
    viewer.showCrosshair(20, 20);
    expect(viewer.root.querySelectorAll('.query-crosshair')).toHaveLength(1);
    viewer.hideCrosshair();
    expect(viewer.root.querySelectorAll('.query-crosshair')).toHaveLength(0);
  });
});
