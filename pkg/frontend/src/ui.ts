import { SessionController } from './session.js';
import { CONFIDENCE_LEVELS, type SessionViewState } from './types.js';

/**
 * Plain-DOM view for one rater session: a single image at native
 * aspect, the mode's answer controls, a progress line, and a submit
 * button.  Keyboard shortcuts: digits pick a class, R/S pick
 * real/synthetic, Enter submits.
 */
export class SessionView {
  private image: HTMLImageElement;
  private progress: HTMLElement;
  private controls: HTMLElement;
  private submit: HTMLButtonElement;
  private status: HTMLElement;

  constructor(
    private readonly root: HTMLElement,
    private readonly controller: SessionController,
  ) {
    root.innerHTML = `
      <div class="annotate">
        <div class="progress"></div>
        <img class="item-image" alt="study item" />
        <div class="controls"></div>
        <button class="submit" type="button">Submit</button>
        <div class="status" role="alert"></div>
      </div>`;
    this.image = root.querySelector('.item-image')!;
    this.progress = root.querySelector('.progress')!;
    this.controls = root.querySelector('.controls')!;
    this.submit = root.querySelector('.submit')!;
    this.status = root.querySelector('.status')!;

    this.submit.addEventListener('click', () => void controller.submitAndAdvance());
    root.ownerDocument.addEventListener('keydown', (e) => this.onKey(e));
    controller.onChange((s) => this.render(s));
    this.render(controller.state);
  }

  private onKey(e: KeyboardEvent): void {
    const s = this.controller.state;
    if (s.done || s.pending) return;
    if (e.key >= '1' && e.key <= '9') {
      const idx = Number(e.key) - 1;
      if (idx < s.classes.length) this.controller.selectClass(s.classes[idx]);
    } else if (s.mode === 'turing' && (e.key === 'r' || e.key === 'R')) {
      this.controller.selectRealness(true);
    } else if (s.mode === 'turing' && (e.key === 's' || e.key === 'S')) {
      this.controller.selectRealness(false);
    } else if (e.key === 'Enter') {
      void this.controller.submitAndAdvance();
    }
  }

  render(s: SessionViewState): void {
    this.progress.textContent = `${s.progress.answered} / ${s.progress.total}`;

    if (s.done) {
      this.image.removeAttribute('src');
      this.image.style.display = 'none';
      this.controls.innerHTML = '<p class="complete">Session complete. Thank you!</p>';
      this.submit.disabled = true;
      this.status.textContent = '';
      return;
    }

    this.image.style.display = '';
    if (s.imageUrl && this.image.src !== s.imageUrl) {
      this.image.src = s.imageUrl;
    }

    this.controls.innerHTML = '';
    if (s.mode === 'turing') {
      this.controls.appendChild(
        this.buttonGroup('realness', [
          { label: 'Real (R)', value: 'real', active: s.answers.guessedReal === true,
            onPick: () => this.controller.selectRealness(true) },
          { label: 'Synthetic (S)', value: 'synthetic',
            active: s.answers.guessedReal === false,
            onPick: () => this.controller.selectRealness(false) },
        ], s.pending),
      );
    }
    this.controls.appendChild(
      this.buttonGroup('classes', s.classes.map((name, i) => ({
        label: `${i + 1}. ${name}`,
        value: name,
        active: s.answers.guessedClass === name,
        onPick: () => this.controller.selectClass(name),
      })), s.pending),
    );
    if (s.mode === 'labelling') {
      this.controls.appendChild(
        this.buttonGroup('confidence', CONFIDENCE_LEVELS.map((level) => ({
          label: level,
          value: level,
          active: s.answers.confidence === level,
          onPick: () => this.controller.selectConfidence(level),
        })), s.pending),
      );
    }

    this.submit.disabled = s.pending || !this.controller.canSubmit();
    this.submit.textContent = s.pending ? 'Submitting…' : 'Submit';
    this.status.textContent = s.error ? `${s.error} — press Submit to retry` : '';
  }

  private buttonGroup(
    name: string,
    options: Array<{ label: string; value: string; active: boolean; onPick: () => void }>,
    disabled: boolean,
  ): HTMLElement {
    const group = this.root.ownerDocument.createElement('div');
    group.className = `group group-${name}`;
    for (const opt of options) {
      const btn = this.root.ownerDocument.createElement('button');
      btn.type = 'button';
      btn.textContent = opt.label;
      btn.dataset.value = opt.value;
      btn.disabled = disabled;
      btn.className = opt.active ? 'option active' : 'option';
      btn.addEventListener('click', opt.onPick);
      group.appendChild(btn);
    }
    return group;
  }
}
