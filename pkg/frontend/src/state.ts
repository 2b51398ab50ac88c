// What the UI remembers between events. Everything label-related lives on
// the server; this is view state only, so a refresh loses nothing.

import type { PreviewKind, QueryProposal } from './api';

export interface ViewState {
  frameId: number;
  kind: PreviewKind;
  opacity: number;
  level: number;
  activeLabel: number | string | null;
  pendingQuery: QueryProposal | null;
  connected: boolean;
  snapshotVersion: number;
}

export function initialState(): ViewState {
  return {
    frameId: 0,
    kind: 'overlay',
    opacity: 0.5,
    level: 1,
    activeLabel: null,
    pendingQuery: null,
    connected: false,
    snapshotVersion: -1,
  };
}

export function clampOpacity(x: number): number {
  if (!Number.isFinite(x)) return 0.5;
  return Math.min(1, Math.max(0, x));
}
