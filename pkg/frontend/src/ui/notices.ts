// Dismissible error notices; service failures surface here instead of
// the console.

export class Notices {
  constructor(readonly root: HTMLElement) {
    root.classList.add('notices');
  }

  push(message: string): void {
    const el = document.createElement('div');
    el.className = 'notice';
    el.innerHTML = `<span class="text"></span><button type="button" class="dismiss">×</button>`;
    el.querySelector('.text')!.textContent = message;
    el.querySelector('.dismiss')!.addEventListener('click', () => el.remove());
    this.root.append(el);
  }

  get messages(): string[] {
    return Array.from(this.root.querySelectorAll('.notice .text'), (el) => el.textContent ?? '');
  }
}
