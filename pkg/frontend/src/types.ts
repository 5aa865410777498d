export type StudyMode = 'turing' | 'labelling';

export type ConfidenceLevel = 'High' | 'Moderate' | 'Low' | 'None';

export const CONFIDENCE_LEVELS: ConfidenceLevel[] = ['High', 'Moderate', 'Low', 'None'];

export interface Progress {
  answered: number;
  total: number;
}

export interface SessionInfo {
  token: string;
  study_id: string;
  mode: StudyMode;
  total: number;
  answered: number;
}

/** Next-item payload; the service never includes truth fields here. */
export interface NextItem {
  done: boolean;
  item_id?: string;
  image_url?: string;
  mode: StudyMode;
  classes?: string[];
  progress: Progress;
}

export interface JudgmentPayload {
  item_id: string;
  guessed_real?: boolean | null;
  guessed_class?: string | null;
  confidence?: ConfidenceLevel | null;
}

export interface Ack {
  ok: boolean;
  duplicate: boolean;
  progress: Progress;
}

/** Currently selected answers for the displayed item. */
export interface Answers {
  guessedReal?: boolean;
  guessedClass?: string;
  confidence?: ConfidenceLevel;
}

export interface SessionViewState {
  token: string;
  mode: StudyMode;
  classes: string[];
  itemId: string | null;
  imageUrl: string | null;
  progress: Progress;
  answers: Answers;
  /** a submission is in flight; all controls disabled */
  pending: boolean;
  done: boolean;
  /** last network failure, cleared on retry */
  error: string | null;
}
