/** DOM wiring for the blinded ranking interface.
 *
 * Layout: a case list with per-rater completion badges, then per case
 * the reference panel beside the neutral-labeled method panels (in the
 * server's order) and a drag-to-reorder ranking list. Submissions that
 * fail due to network trouble are queued and replayed.
 */

import {
  loadCase,
  loadSession,
  submitRanking,
  type CaseView,
  type RankingPayload,
  type SessionView,
  type SubmitResult,
} from "./api.js";
import { RetryQueue } from "./queue.js";
import {
  isPermutation,
  moveLabel,
  nextPendingCase,
  sessionProgress,
} from "./state.js";

const root = document.getElementById("app") as HTMLElement;
const queue = new RetryQueue(window.localStorage);

let session: SessionView | null = null;
let rater = window.sessionStorage.getItem("rater") ?? "";
let currentCase: string | null = null;
let ranking: string[] = [];
let submitting = false;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function banner(message: string, kind: "info" | "error"): HTMLElement {
  return el("div", `banner banner-${kind}`, message);
}

async function post(payload: RankingPayload): Promise<SubmitResult> {
  return submitRanking(payload);
}

async function flushQueue(): Promise<void> {
  if (queue.size() === 0) {
    return;
  }
  const outcomes = await queue.flush(post);
  if (outcomes.some((o) => o.result.kind === "accepted")) {
    await refresh();
  }
}

function renderRaterPrompt(): void {
  root.replaceChildren();
  const form = el("form", "rater-form");
  const label = el("label", undefined, "Rater name");
  const input = el("input");
  input.required = true;
  input.placeholder = "e.g. rater1";
  const button = el("button", undefined, "Start rating");
  form.append(label, input, button);
  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const name = input.value.trim();
    if (!name) {
      return;
    }
    rater = name;
    window.sessionStorage.setItem("rater", rater);
    void refresh();
  });
  root.append(el("h1", undefined, "Blinded image ranking"), form);
}

function renderSessionList(view: SessionView): void {
  root.replaceChildren();
  root.append(el("h1", undefined, "Blinded image ranking"));
  const progress = sessionProgress(view.cases, rater);
  root.append(
    el("p", "progress", `${rater} — progress ${progress.done}/${progress.total}`),
  );
  if (queue.size() > 0) {
    root.append(
      banner(`${queue.size()} ranking(s) queued offline — will retry`, "info"),
    );
  }
  if (view.cases.length === 0) {
    root.append(el("p", "placeholder", "no cases"));
    return;
  }
  const list = el("ul", "case-list");
  for (const c of view.cases) {
    const item = el("li", "case-row");
    const link = el("a", undefined, c.id);
    link.href = "#";
    link.addEventListener("click", (ev) => {
      ev.preventDefault();
      void openCase(c.id);
    });
    const badge = el(
      "span",
      c.status[rater] ? "badge badge-done" : "badge badge-pending",
      c.status[rater] ? "completed" : "pending",
    );
    item.append(link, badge);
    list.append(item);
  }
  root.append(list);
}

function renderCase(view: CaseView): void {
  root.replaceChildren();
  const back = el("a", "back-link", "back to case list");
  back.href = "#";
  back.addEventListener("click", (ev) => {
    ev.preventDefault();
    currentCase = null;
    void refresh();
  });
  root.append(back, el("h1", undefined, `Case ${view.case_id}`));

  const strip = el("div", "panel-strip");
  const ref = el("figure", "panel");
  const refImg = el("img");
  refImg.src = view.reference_url;
  refImg.alt = "Uncorrected reference";
  ref.append(refImg, el("figcaption", undefined, "Uncorrected"));
  strip.append(ref);
  for (const panel of view.panels) {
    const fig = el("figure", "panel");
    const img = el("img");
    img.src = panel.image_url;
    img.alt = panel.label;
    fig.append(img, el("figcaption", undefined, panel.label));
    strip.append(fig);
  }
  root.append(strip);

  root.append(
    el("p", "hint", "Drag to order from best (top) to worst (bottom)."),
  );
  const list = el("ol", "ranking-list");
  const statusLine = el("p", "status-line");
  const submit = el("button", "submit", "Submit ranking");

  const labels = view.panels.map((p) => p.label);
  const redraw = () => {
    list.replaceChildren();
    ranking.forEach((label, index) => {
      const item = el("li", "ranking-item", label);
      item.draggable = true;
      item.dataset.index = String(index);
      item.addEventListener("dragstart", (ev) => {
        ev.dataTransfer?.setData("text/plain", String(index));
      });
      item.addEventListener("dragover", (ev) => ev.preventDefault());
      item.addEventListener("drop", (ev) => {
        ev.preventDefault();
        const from = Number(ev.dataTransfer?.getData("text/plain"));
        if (Number.isInteger(from)) {
          ranking = moveLabel(ranking, from, index);
          redraw();
        }
      });
      list.append(item);
    });
    submit.disabled = submitting || !isPermutation(ranking, labels);
  };
  redraw();

  submit.addEventListener("click", () => {
    void (async () => {
      if (submitting || !isPermutation(ranking, labels)) {
        return;
      }
      submitting = true;
      submit.disabled = true;
      const payload: RankingPayload = {
        rater,
        case_id: view.case_id,
        ranking: [...ranking],
      };
      const result = await submitRanking(payload);
      submitting = false;
      if (result.kind === "accepted") {
        currentCase = null;
        await refresh();
        const next = session
          ? nextPendingCase(session.cases, rater, view.case_id)
          : null;
        if (next !== null) {
          await openCase(next);
        }
        return;
      }
      if (result.kind === "offline") {
        queue.enqueue(payload);
        statusLine.textContent =
          "Offline — ranking queued, will submit automatically.";
      } else {
        statusLine.textContent = `Rejected: ${result.message}`;
      }
      submit.disabled = !isPermutation(ranking, labels);
    })();
  });

  root.append(list, submit, statusLine);
}

async function openCase(caseId: string): Promise<void> {
  try {
    const view = await loadCase(caseId);
    currentCase = caseId;
    ranking = view.panels.map((p) => p.label);
    renderCase(view);
  } catch {
    root.replaceChildren(
      banner("Could not load case — check the connection and retry.", "error"),
    );
  }
}

async function refresh(): Promise<void> {
  if (!rater) {
    renderRaterPrompt();
    return;
  }
  try {
    session = await loadSession();
  } catch {
    root.replaceChildren(
      banner("API unreachable — retrying in 5 s.", "error"),
    );
    window.setTimeout(() => void refresh(), 5000);
    return;
  }
  if (currentCase === null) {
    renderSessionList(session);
  }
}

window.addEventListener("online", () => void flushQueue());
window.setInterval(() => void flushQueue(), 15000);
void refresh().then(() => flushQueue());
