// Flat-mode class palette: swatch per class, one active, plus a
// create-class form. All mutations go through the service.

import type { FlatClass } from '../api';

export class Palette {
  private classes: FlatClass[] = [];
  private active: number | null = null;
  private selectHandlers: ((id: number) => void)[] = [];
  private createHandlers: ((name: string) => void)[] = [];

  constructor(readonly root: HTMLElement) {
    root.classList.add('palette');
    root.innerHTML = `
      <div class="swatches"></div>
      <form class="add-class">
        <input type="text" name="name" placeholder="new class" autocomplete="off" />
        <button type="submit">add</button>
      </form>
    `;
    root.querySelector('form')!.addEventListener('submit', (ev) => {
      ev.preventDefault();
      const input = root.querySelector<HTMLInputElement>('input[name=name]')!;
      const name = input.value.trim();
      if (name === '') return;
      input.value = '';
      for (const handler of this.createHandlers) handler(name);
    });
  }

  setClasses(classes: FlatClass[]): void {
    this.classes = classes;
    if (this.active === null && classes.length > 0) this.active = classes[0].id;
    this.render();
  }

  get activeClass(): number | null {
    return this.active;
  }

  colourOf(id: number): string {
    const c = this.classes.find((k) => k.id === id);
    return c ? `rgb(${c.colour[0]}, ${c.colour[1]}, ${c.colour[2]})` : '#fff';
  }

  onSelect(handler: (id: number) => void): void {
    this.selectHandlers.push(handler);
  }

  onCreate(handler: (name: string) => void): void {
    this.createHandlers.push(handler);
  }

  private render(): void {
    const box = this.root.querySelector('.swatches')!;
    box.replaceChildren(
      ...this.classes.map((c) => {
        const el = document.createElement('button');
        el.type = 'button';
        el.className = 'swatch' + (c.id === this.active ? ' active' : '');
        el.dataset.classId = String(c.id);
        el.innerHTML = `<span class="chip"></span><span class="label">${c.name}</span>`;
        el.querySelector<HTMLElement>('.chip')!.style.background = this.colourOf(c.id);
        el.addEventListener('click', () => {
          this.active = c.id;
          this.render();
          for (const handler of this.selectHandlers) handler(c.id);
        });
        return el;
      }),
    );
  }
}
