// Client-side view over the label schema: lookup tables for the level
// slider and palette rendering, in both label modes.

import type { FlatClass, Schema, TreeNodeInfo } from './api';

export function colourKey(rgb: [number, number, number]): number {
  return (rgb[0] << 16) | (rgb[1] << 8) | rgb[2];
}

export interface SchemaView {
  mode: 'flat' | 'hierarchical';
  maxDepth: number;
  flatClasses: FlatClass[];
  nodes: TreeNodeInfo[];
  colourToPath: Map<number, string>;
  pathColour: Map<string, [number, number, number]>;
}

export function buildSchemaView(schema: Schema): SchemaView {
  if (schema.mode === 'flat') {
    return {
      mode: 'flat',
      maxDepth: 0,
      flatClasses: schema.classes,
      nodes: [],
      colourToPath: new Map(),
      pathColour: new Map(),
    };
  }
  const colourToPath = new Map<number, string>();
  const pathColour = new Map<string, [number, number, number]>();
  for (const node of schema.nodes) {
    colourToPath.set(colourKey(node.colour), node.path);
    pathColour.set(node.path, node.colour);
  }
  return {
    mode: 'hierarchical',
    maxDepth: schema.max_depth,
    flatClasses: [],
    nodes: schema.nodes,
    colourToPath,
    pathColour,
  };
}

/**
 * Nodes shown in the legend at a display level: nodes at exactly that
 * depth, plus shallower leaves (they have no descendants to merge into).
 */
export function levelPalette(view: SchemaView, level: number): TreeNodeInfo[] {
  const paths = new Set(view.nodes.map((n) => n.path));
  return view.nodes.filter((n) => {
    if (n.path.length === level) return true;
    if (n.path.length > level) return false;
    return !paths.has(n.path + '0') && !paths.has(n.path + '1');
  });
}

export function isValidLabel(view: SchemaView, label: number | string): boolean {
  if (view.mode === 'flat') {
    return typeof label === 'number' && view.flatClasses.some((c) => c.id === label);
  }
  return typeof label === 'string' && view.pathColour.has(label);
}
