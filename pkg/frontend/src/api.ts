import type { Ack, JudgmentPayload, NextItem, SessionInfo } from './types.js';

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let code = 'unknown';
  let message = `HTTP ${response.status}`;
  try {
    const body = (await response.json()) as {
      error?: { code?: string; message?: string };
    };
    if (body.error) {
      code = body.error.code ?? code;
      message = body.error.message ?? message;
    }
  } catch {
    // non-JSON error body; keep defaults
  }
  return new ApiError(response.status, code, message);
}

/**
 * Typed client for the annotation-service endpoints a rater session
 * needs.  Deliberately has no report or truth-label methods: the client
 * must never request those during an open session.
 */
export class ApiClient {
  constructor(private readonly baseUrl: string) {}

  resolve(path: string): string {
    return new URL(path, this.baseUrl).toString();
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const response = await fetch(this.resolve(path), {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  private async get<T>(path: string): Promise<T> {
    const response = await fetch(this.resolve(path));
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  createSession(studyId: string, raterId: string): Promise<SessionInfo> {
    return this.post<SessionInfo>(
      `/studies/${encodeURIComponent(studyId)}/sessions`,
      { rater_id: raterId },
    );
  }

  nextItem(token: string): Promise<NextItem> {
    return this.get<NextItem>(`/sessions/${encodeURIComponent(token)}/next`);
  }

  submitJudgment(token: string, payload: JudgmentPayload): Promise<Ack> {
    return this.post<Ack>(
      `/sessions/${encodeURIComponent(token)}/judgments`,
      payload,
    );
  }
}
