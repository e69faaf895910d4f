// Session driver: fetch next item, render, submit, repeat until done.
// Reloading resumes wherever the server says the session stands; the only
// client-side state is the session id carried in the URL.

import { StudyApi, type GuessItem, type RatingItem } from "./api.js";
import { ItemFlow } from "./state.js";
import {
  renderDone,
  renderError,
  renderGuessView,
  renderProgress,
  renderRatingView,
} from "./views.js";

export interface AppConfig {
  apiBase: string;
  user: string;
  seed: number;
  sessionId?: string;
}

export function configFromLocation(loc: Location): AppConfig {
  const params = new URLSearchParams(loc.search);
  return {
    apiBase: params.get("api") ?? "http://127.0.0.1:8765",
    user: params.get("user") ?? "anonymous",
    seed: Number(params.get("seed") ?? "0"),
    sessionId: params.get("session") ?? undefined,
  };
}

export class StudyApp {
  readonly api: StudyApi;
  sessionId: string | null = null;

  constructor(
    private doc: Document,
    private mount: HTMLElement,
    private config: AppConfig,
    fetchFn: typeof fetch = fetch,
  ) {
    this.api = new StudyApi(config.apiBase, fetchFn);
  }

  async start(): Promise<void> {
    try {
      if (this.config.sessionId) {
        this.sessionId = this.config.sessionId;
      } else {
        const info = await this.api.createSession(this.config.user, this.config.seed);
        this.sessionId = info.session_id;
        const url = new URL(this.doc.defaultView!.location.href);
        url.searchParams.set("session", this.sessionId);
        this.doc.defaultView!.history.replaceState(null, "", url.toString());
      }
      await this.showNext();
    } catch (e) {
      this.mount.replaceChildren(renderError(this.doc, String(e)));
    }
  }

  async showNext(): Promise<void> {
    const next = await this.api.next(this.sessionId!);
    this.mount.replaceChildren(renderProgress(this.doc, next.answered, next.total));
    if (next.done || !next.item) {
      this.mount.appendChild(renderDone(this.doc, next));
      return;
    }
    const flow = new ItemFlow(next.item);
    const onSubmit = () => {
      void this.submit(flow);
    };
    const view =
      next.item.experiment === 1
        ? renderGuessView(this.doc, this.api, next.item as GuessItem, flow, onSubmit)
        : renderRatingView(this.doc, this.api, next.item as RatingItem, flow, onSubmit);
    this.mount.appendChild(view);
  }

  private async submit(flow: ItemFlow): Promise<void> {
    try {
      // "already-answered" (duplicate) also advances: the server has it
      await this.api.submit(this.sessionId!, flow.buildPayload());
      await this.showNext();
    } catch (e) {
      this.mount.replaceChildren(renderError(this.doc, String(e)));
    }
  }
}
