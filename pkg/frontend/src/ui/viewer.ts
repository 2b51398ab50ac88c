// Keyframe canvas: draws the current raster, reports clicks in native
// image coordinates whatever the CSS zoom, shows click markers and the
// hands-free query crosshair.

import type { Raster } from '../raster';
import { scaleRaster } from '../raster';

export interface ViewerClick {
  u: number;
  v: number;
}

export class Viewer {
  readonly canvas: HTMLCanvasElement;
  private readonly markerLayer: HTMLDivElement;
  private frameWidth = 0;
  private frameHeight = 0;
  private raster: Raster | null = null;
  private clickHandlers: ((c: ViewerClick) => void)[] = [];

  constructor(readonly root: HTMLElement) {
    root.classList.add('viewer');
    this.canvas = document.createElement('canvas');
    this.markerLayer = document.createElement('div');
    this.markerLayer.className = 'marker-layer';
    root.append(this.canvas, this.markerLayer);
    this.canvas.addEventListener('click', (ev) => this.handleClick(ev));
  }

  setFrameSize(width: number, height: number): void {
    this.frameWidth = width;
    this.frameHeight = height;
    this.canvas.width = width;
    this.canvas.height = height;
    this.clearMarkers();
  }

  /** The raster most recently drawn; tests assert on this buffer. */
  get currentRaster(): Raster | null {
    return this.raster;
  }

  setRaster(raster: Raster): void {
    this.raster = scaleRaster(raster, this.frameWidth, this.frameHeight);
    const ctx = this.canvas.getContext('2d');
    if (ctx === null) return; // headless test environment: buffer only
    const image = new ImageData(this.raster.data, this.frameWidth, this.frameHeight);
    ctx.putImageData(image, 0, 0);
  }

  onClick(handler: (c: ViewerClick) => void): void {
    this.clickHandlers.push(handler);
  }

  private handleClick(ev: MouseEvent): void {
    if (this.frameWidth === 0 || this.frameHeight === 0) return;
    const rect = this.canvas.getBoundingClientRect();
    if (rect.width === 0 || rect.height === 0) return;
    const u = Math.floor(((ev.clientX - rect.left) / rect.width) * this.frameWidth);
    const v = Math.floor(((ev.clientY - rect.top) / rect.height) * this.frameHeight);
    const click = {
      u: Math.min(this.frameWidth - 1, Math.max(0, u)),
      v: Math.min(this.frameHeight - 1, Math.max(0, v)),
    };
    for (const handler of this.clickHandlers) handler(click);
  }

  /** Optimistic click marker, drawn before the server confirms. */
  addMarker(u: number, v: number, colour: string): void {
    const marker = document.createElement('div');
    marker.className = 'click-marker';
    marker.style.left = `${((u + 0.5) / this.frameWidth) * 100}%`;
    marker.style.top = `${((v + 0.5) / this.frameHeight) * 100}%`;
    marker.style.borderColor = colour;
    this.markerLayer.append(marker);
  }

  clearMarkers(): void {
    this.markerLayer.replaceChildren();
  }

  showCrosshair(u: number, v: number): void {
    this.hideCrosshair();
    const cross = document.createElement('div');
    cross.className = 'query-crosshair';
    cross.style.left = `${((u + 0.5) / this.frameWidth) * 100}%`;
    cross.style.top = `${((v + 0.5) / this.frameHeight) * 100}%`;
    this.markerLayer.append(cross);
  }

  hideCrosshair(): void {
    this.markerLayer.querySelectorAll('.query-crosshair').forEach((el) => el.remove());
  }
}
