// Hierarchical-mode editor: the label tree with add-child controls, an
// active node, and the level slider that picks the displayed depth.

import type { TreeNodeInfo } from '../api';
import { levelPalette, type SchemaView } from '../schema';

export class TreeEditor {
  private view: SchemaView | null = null;
  private active: string | null = null;
  private level = 1;
  private selectHandlers: ((path: string) => void)[] = [];
  private addHandlers: ((path: string, name: string) => void)[] = [];
  private levelHandlers: ((level: number) => void)[] = [];

  constructor(readonly root: HTMLElement) {
    root.classList.add('tree-editor');
    root.innerHTML = `
      <div class="nodes"></div>
      <form class="add-node">
        <input type="text" name="name" placeholder="node name" autocomplete="off" />
        <button type="button" data-branch="0">+ left</button>
        <button type="button" data-branch="1">+ right</button>
      </form>
      <label class="level">level
        <input type="range" name="level" min="1" max="1" step="1" value="1" />
        <span class="level-value">1</span>
      </label>
      <div class="legend"></div>
    `;
    root.querySelectorAll<HTMLButtonElement>('[data-branch]').forEach((button) => {
      button.addEventListener('click', () => {
        const input = root.querySelector<HTMLInputElement>('input[name=name]')!;
        const name = input.value.trim();
        if (name === '') return;
        const parent = this.active ?? '';
        input.value = '';
        for (const handler of this.addHandlers) handler(parent + button.dataset.branch, name);
      });
    });
    const slider = root.querySelector<HTMLInputElement>('input[name=level]')!;
    slider.addEventListener('input', () => {
      this.level = Number(slider.value);
      this.render();
      for (const handler of this.levelHandlers) handler(this.level);
    });
  }

  setView(view: SchemaView): void {
    this.view = view;
    const slider = this.root.querySelector<HTMLInputElement>('input[name=level]')!;
    slider.max = String(Math.max(1, view.maxDepth));
    if (this.active !== null && !view.pathColour.has(this.active)) this.active = null;
    if (this.active === null && view.nodes.length > 0) this.active = view.nodes[0].path;
    this.render();
  }

  get activePath(): string | null {
    return this.active;
  }

  get displayLevel(): number {
    return this.level;
  }

  /** Legend entries currently shown; the round-trip test reads these. */
  get legendNodes(): TreeNodeInfo[] {
    return this.view === null ? [] : levelPalette(this.view, this.level);
  }

  onSelect(handler: (path: string) => void): void {
    this.selectHandlers.push(handler);
  }

  onAdd(handler: (path: string, name: string) => void): void {
    this.addHandlers.push(handler);
  }

  onLevel(handler: (level: number) => void): void {
    this.levelHandlers.push(handler);
  }

  private render(): void {
    if (this.view === null) return;
    const box = this.root.querySelector('.nodes')!;
    box.replaceChildren(
      ...this.view.nodes.map((node) => {
        const el = document.createElement('button');
        el.type = 'button';
        el.className = 'node' + (node.path === this.active ? ' active' : '');
        el.dataset.path = node.path;
        el.style.paddingLeft = `${node.path.length}em`;
        const [r, g, b] = node.colour;
        el.innerHTML = `<span class="chip"></span><span class="label">${node.name} <code>${node.path}</code></span>`;
        el.querySelector<HTMLElement>('.chip')!.style.background = `rgb(${r}, ${g}, ${b})`;
        el.addEventListener('click', () => {
          // re-clicking the active node deselects it, so the next add
          // targets the root split rather than a child of this node
          this.active = node.path === this.active ? null : node.path;
          this.render();
          if (this.active !== null) for (const handler of this.selectHandlers) handler(node.path);
        });
        return el;
      }),
    );
    this.root.querySelector('.level-value')!.textContent = String(this.level);
    const legend = this.root.querySelector('.legend')!;
    legend.replaceChildren(
      ...this.legendNodes.map((node) => {
        const el = document.createElement('span');
        el.className = 'legend-entry';
        el.dataset.path = node.path;
        const [r, g, b] = node.colour;
        el.innerHTML = `<span class="chip"></span>${node.name}`;
        el.querySelector<HTMLElement>('.chip')!.style.background = `rgb(${r}, ${g}, ${b})`;
        return el;
      }),
    );
  }
}
