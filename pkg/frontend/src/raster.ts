// Pixel buffers and the client-side overlay compositor. Blending happens
// here, not on the server, so the opacity slider needs no round-trip.

export interface Raster {
  width: number;
  height: number;
  /** RGBA, row-major. */
  data: Uint8ClampedArray<ArrayBuffer>;
}

export function makeRaster(width: number, height: number): Raster {
  return { width, height, data: new Uint8ClampedArray(width * height * 4) };
}

export function pixelAt(r: Raster, u: number, v: number): [number, number, number] {
  const i = (v * r.width + u) * 4;
  return [r.data[i], r.data[i + 1], r.data[i + 2]];
}

/** out = (1 - opacity) * colour + opacity * semantics, rounded per channel. */
export function blendOverlay(colour: Raster, semantics: Raster, opacity: number): Raster {
  if (colour.width !== semantics.width || colour.height !== semantics.height) {
    throw new Error('raster size mismatch');
  }
  const a = Math.min(1, Math.max(0, opacity));
  const out = makeRaster(colour.width, colour.height);
  for (let i = 0; i < out.data.length; i += 4) {
    out.data[i] = Math.round((1 - a) * colour.data[i] + a * semantics.data[i]);
    out.data[i + 1] = Math.round((1 - a) * colour.data[i + 1] + a * semantics.data[i + 1]);
    out.data[i + 2] = Math.round((1 - a) * colour.data[i + 2] + a * semantics.data[i + 2]);
    out.data[i + 3] = 255;
  }
  return out;
}

/** Nearest-neighbour upscale so strided previews fill the native canvas. */
export function scaleRaster(src: Raster, width: number, height: number): Raster {
  if (src.width === width && src.height === height) return src;
  const out = makeRaster(width, height);
  for (let v = 0; v < height; v++) {
    const sv = Math.min(src.height - 1, Math.floor((v * src.height) / height));
    for (let u = 0; u < width; u++) {
      const su = Math.min(src.width - 1, Math.floor((u * src.width) / width));
      const si = (sv * src.width + su) * 4;
      const di = (v * width + u) * 4;
      out.data[di] = src.data[si];
      out.data[di + 1] = src.data[si + 1];
      out.data[di + 2] = src.data[si + 2];
      out.data[di + 3] = src.data[si + 3];
    }
  }
  return out;
}

/**
 * Recolour a semantics raster to a shallower tree level: each palette
 * colour is replaced by the colour of its node's ancestor at that depth.
 * Colours outside the mapping pass through unchanged.
 */
export function remapToLevel(
  semantics: Raster,
  colourToPath: Map<number, string>,
  pathColour: Map<string, [number, number, number]>,
  level: number,
): Raster {
  const out = makeRaster(semantics.width, semantics.height);
  out.data.set(semantics.data);
  for (let i = 0; i < out.data.length; i += 4) {
    const key = (out.data[i] << 16) | (out.data[i + 1] << 8) | out.data[i + 2];
    const path = colourToPath.get(key);
    if (path === undefined || path.length <= level) continue;
    const colour = pathColour.get(path.slice(0, level));
    if (colour === undefined) continue;
    out.data[i] = colour[0];
    out.data[i + 1] = colour[1];
    out.data[i + 2] = colour[2];
  }
  return out;
}
