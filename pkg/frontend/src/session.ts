import { ApiClient, ApiError } from './api.js';
import type {
  Answers,
  ConfidenceLevel,
  SessionViewState,
  StudyMode,
} from './types.js';

/**
 * Drives one rater session: fetches the service-dictated next item,
 * holds the current answers, and submits exactly one judgment at a
 * time.  A conflict response means the item was already answered (e.g.
 * in another tab), so the controller refetches the current item instead
 * of retrying.
 */
export class SessionController {
  state: SessionViewState;
  private listeners: Array<(s: SessionViewState) => void> = [];

  constructor(
    private readonly api: ApiClient,
    token: string,
    mode: StudyMode,
    classes: string[],
  ) {
    this.state = {
      token,
      mode,
      classes,
      itemId: null,
      imageUrl: null,
      progress: { answered: 0, total: 0 },
      answers: {},
      pending: false,
      done: false,
      error: null,
    };
  }

  static async open(
    api: ApiClient,
    studyId: string,
    raterId: string,
  ): Promise<SessionController> {
    const info = await api.createSession(studyId, raterId);
    const controller = new SessionController(api, info.token, info.mode, []);
    await controller.refresh();
    return controller;
  }

  onChange(listener: (s: SessionViewState) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const l of this.listeners) l(this.state);
  }

  /** Fetch the current item from the service (also used to resume). */
  async refresh(): Promise<void> {
    const next = await this.api.nextItem(this.state.token);
    this.state = {
      ...this.state,
      mode: next.mode,
      classes: next.classes ?? this.state.classes,
      itemId: next.done ? null : (next.item_id ?? null),
      imageUrl: next.done || !next.image_url ? null : this.api.resolve(next.image_url),
      progress: next.progress,
      answers: {},
      done: next.done,
      error: null,
    };
    this.emit();
  }

  selectClass(name: string): void {
    if (this.state.pending || this.state.done) return;
    this.state = { ...this.state, answers: { ...this.state.answers, guessedClass: name } };
    this.emit();
  }

  selectRealness(real: boolean): void {
    if (this.state.pending || this.state.done) return;
    this.state = { ...this.state, answers: { ...this.state.answers, guessedReal: real } };
    this.emit();
  }

  selectConfidence(level: ConfidenceLevel): void {
    if (this.state.pending || this.state.done) return;
    this.state = { ...this.state, answers: { ...this.state.answers, confidence: level } };
    this.emit();
  }

  /** All required answers chosen for the current mode? */
  canSubmit(answers: Answers = this.state.answers): boolean {
    if (this.state.done || this.state.itemId === null) return false;
    if (this.state.mode === 'turing') {
      return answers.guessedReal !== undefined && answers.guessedClass !== undefined;
    }
    return answers.guessedClass !== undefined && answers.confidence !== undefined;
  }

  /**
   * Submit the current answers and advance to the next item.  No-op
   * while a submission is already in flight (double-click safe); on
   * network failure the answers are kept so the user can retry.
   */
  async submitAndAdvance(): Promise<void> {
    if (this.state.pending || !this.canSubmit()) return;
    const itemId = this.state.itemId!;
    this.state = { ...this.state, pending: true, error: null };
    this.emit();
    try {
      await this.api.submitJudgment(this.state.token, {
        item_id: itemId,
        guessed_real: this.state.answers.guessedReal ?? null,
        guessed_class: this.state.answers.guessedClass ?? null,
        confidence: this.state.answers.confidence ?? null,
      });
      this.state = { ...this.state, pending: false };
      await this.refresh();
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // answered elsewhere: re-sync with the service-dictated order
        this.state = { ...this.state, pending: false };
        await this.refresh();
        return;
      }
      this.state = {
        ...this.state,
        pending: false,
        error: err instanceof Error ? err.message : String(err),
      };
      this.emit();
    }
  }
}
