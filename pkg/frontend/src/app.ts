// Hash-routed single-page wiring: #/ is the session list, #/sessions/<id> the
// detail view. All state lives on the server; every navigation refetches.

import { ApiError, ReviewApi } from "./api.js";
import { renderError, renderSessionDetail, renderSessionList } from "./views.js";
import type { SessionDetail } from "./types.js";

export interface App {
  start(): Promise<void>;
  showList(): Promise<void>;
  showDetail(id: string): Promise<void>;
  /** Reads the refine textarea and submits; Accept ignores the text. */
  submitReview(verdict: "Accept" | "Refine"): Promise<void>;
  currentDetail(): SessionDetail | null;
}

export function createApp(root: HTMLElement, api: ReviewApi, doc: Document = document): App {
  let detail: SessionDetail | null = null;

  function fail(error: unknown): void {
    detail = null;
    const message =
      error instanceof ApiError
        ? `${error.message} (HTTP ${error.status})`
        : error instanceof Error
          ? error.message
          : String(error);
    root.innerHTML = renderError(message);
  }

  function notice(text: string): void {
    const panel = root.querySelector("#review-panel");
    if (!panel) return;
    let box = panel.querySelector(".notice");
    if (!box) {
      box = doc.createElement("p");
      box.className = "notice";
      panel.prepend(box);
    }
    box.textContent = text;
  }

  async function showList(): Promise<void> {
    try {
      const sessions = await api.listSessions();
      detail = null;
      root.innerHTML = renderSessionList(sessions);
      for (const row of root.querySelectorAll<HTMLElement>(".session-row")) {
        row.addEventListener("click", () => {
          const id = row.dataset.sessionId!;
          doc.defaultView!.location.hash = `#/sessions/${encodeURIComponent(id)}`;
        });
      }
    } catch (error) {
      fail(error);
    }
  }

  function renderDetail(next: SessionDetail): void {
    detail = next;
    root.innerHTML = renderSessionDetail(next);
    const textarea = root.querySelector<HTMLTextAreaElement>("#refine-text");
    if (textarea) {
      // Assigned as a property so the pre-filled request matches the
      // service-configured text byte for byte.
      textarea.value = next.standard_refinement_text;
    }
    root.querySelector("#accept-button")?.addEventListener("click", () => {
      void submitReview("Accept");
    });
    root.querySelector("#refine-button")?.addEventListener("click", () => {
      void submitReview("Refine");
    });
  }

  async function showDetail(id: string): Promise<void> {
    try {
      renderDetail(await api.getSession(id));
    } catch (error) {
      fail(error);
    }
  }

  async function submitReview(verdict: "Accept" | "Refine"): Promise<void> {
    if (!detail) return;
    const id = detail.id;
    if (verdict === "Accept") {
      try {
        await api.submitDecision(id, "Accept");
      } catch (error) {
        if (error instanceof ApiError && error.status === 409) {
          notice(`A decision already exists for this round: ${error.message}`);
          return;
        }
        fail(error);
        return;
      }
      await showDetail(id);
      return;
    }

    const textarea = root.querySelector<HTMLTextAreaElement>("#refine-text");
    const text = textarea?.value ?? "";
    if (!text.trim()) {
      notice("Refinement text must not be empty.");
      return;
    }
    const progress = root.querySelector<HTMLElement>("#refine-progress");
    const fromRound = detail.round;
    try {
      if (progress) progress.hidden = false;
      await api.submitDecision(id, "Refine", text);
      renderDetail(await api.pollUntilAwaitingReview(id, fromRound));
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        notice(`A decision already exists for this round: ${error.message}`);
        return;
      }
      fail(error);
    }
  }

  async function route(): Promise<void> {
    const hash = doc.defaultView!.location.hash;
    const match = /^#\/sessions\/(.+)$/.exec(hash);
    if (match) {
      await showDetail(decodeURIComponent(match[1]!));
    } else {
      await showList();
    }
  }

  async function start(): Promise<void> {
    doc.defaultView!.addEventListener("hashchange", () => {
      void route();
    });
    await route();
  }

  return {
    start,
    showList,
    showDetail,
    submitReview,
    currentDetail: () => detail,
  };
}

export function main(): void {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app mount point");
  const app = createApp(root, new ReviewApi(""));
  void app.start();
}
