// Browser entrypoint: decode PNGs with the native pipeline and mount the
// app on #app, talking to the service that served this page (or the vite
// proxy during development).

import './style.css';
import { createApp } from './app';
import type { Raster } from './raster';

async function decodePng(bytes: ArrayBuffer): Promise<Raster> {
  const bitmap = await createImageBitmap(new Blob([bytes], { type: 'image/png' }));
  const canvas = document.createElement('canvas');
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext('2d')!;
  ctx.drawImage(bitmap, 0, 0);
  const image = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
  return { width: image.width, height: image.height, data: image.data };
}

const root = document.querySelector<HTMLElement>('#app')!;
createApp(root, window.location.origin, { decodePng }).catch((err) => {
  root.innerHTML = `<p class="boot-error">failed to reach the label service: ${err}</p>`;
});
