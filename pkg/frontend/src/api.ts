// Typed client for the study service JSON API (schema_version 1).

export interface SessionInfo {
  schema_version: number;
  session_id: string;
  total_items: number;
}

export interface GuessItem {
  id: string;
  experiment: 1;
  method: string;
  prototype_images: string[];
  prototype_ids: number[];
  class_options: number[];
  class_names: Record<string, string>;
}

export interface RatingItem {
  id: string;
  experiment: 2;
  method: string;
  prototype_images: string[];
  prototype_ids: number[];
  revealed_class: number;
  revealed_class_name?: string;
  redundancy_choices: string[];
}

export type StudyItem = GuessItem | RatingItem;

export interface NextResponse {
  schema_version: number;
  done: boolean;
  answered: number;
  total: number;
  item?: StudyItem;
}

export interface SubmitAck {
  schema_version: number;
  status: string;
  answered: number;
  total: number;
}

export interface RatingSlot {
  useful: boolean;
  redundancy: string;
}

export interface SubmitBody {
  item: string;
  guess?: number;
  ratings?: Record<string, RatingSlot>;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function parseError(res: Response): Promise<ApiError> {
  let detail = res.statusText;
  try {
    const body = await res.json();
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(res.status, detail);
}

export class StudyApi {
  constructor(private baseUrl: string, private fetchFn: typeof fetch = fetch) {}

  assetUrl(name: string): string {
    return `${this.baseUrl}/assets/${name}`;
  }

  async createSession(user: string, seed: number, sessionId?: string): Promise<SessionInfo> {
    const res = await this.fetchFn(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ user, seed, session_id: sessionId ?? null }),
    });
    if (!res.ok) throw await parseError(res);
    return res.json();
  }

  async next(sessionId: string): Promise<NextResponse> {
    const res = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/next`);
    if (!res.ok) throw await parseError(res);
    return res.json();
  }

  /**
   * Submit a response. A 409 (duplicate or stale item) is not an error for
   * the client: the answer is already recorded server-side, so the caller
   * should simply advance. Network failures are retried once; the server's
   * duplicate rejection makes the retry idempotent.
   */
  async submit(sessionId: string, body: SubmitBody): Promise<SubmitAck | "already-answered"> {
    const attempt = () =>
      this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/responses`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(body),
      });
    let res: Response;
    try {
      res = await attempt();
    } catch {
      res = await attempt();
    }
    if (res.status === 409) return "already-answered";
    if (!res.ok) throw await parseError(res);
    return res.json();
  }
}
