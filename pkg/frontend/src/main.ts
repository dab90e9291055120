/**
 * DOM glue: wires the search form to the query service and renders results.
 *
 * The API base comes from the ?api= query parameter or defaults to the same
 * host on port 8765. One query is in flight at a time; submitting again
 * aborts the pending request so a stale response never renders.
 */
import { renderError, renderHealth, renderResults, renderScorePanel } from "./render.js";
import type { HealthResponse, QueryResponse } from "./types.js";

function apiBase(): string {
  const fromParam = new URLSearchParams(window.location.search).get("api");
  if (fromParam) return fromParam.replace(/\/+$/, "");
  return `${window.location.protocol}//${window.location.hostname}:8765`;
}

let pending: AbortController | null = null;

async function runQuery(
  question: string,
  k: number,
  nRetrieve: number,
  results: HTMLElement,
  panel: HTMLElement,
): Promise<void> {
  pending?.abort();
  const controller = new AbortController();
  pending = controller;
  results.innerHTML = `<p class="loading">Searching…</p>`;
  panel.innerHTML = "";
  try {
    const resp = await fetch(`${apiBase()}/query`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ question, k, n_retrieve: nRetrieve }),
      signal: controller.signal,
    });
    if (!resp.ok) {
      results.innerHTML = renderError(`HTTP ${resp.status}`);
      return;
    }
    const payload = (await resp.json()) as QueryResponse;
    if (controller !== pending) return; // a newer query superseded this one
    results.innerHTML = renderResults(payload.answers);
    panel.innerHTML = payload.answers.length ? renderScorePanel(payload.answers) : "";
  } catch (err) {
    if ((err as Error).name === "AbortError") return;
    results.innerHTML = renderError((err as Error).message);
  } finally {
    if (controller === pending) pending = null;
  }
}

export function bootstrap(): void {
  const form = document.querySelector<HTMLFormElement>("#search-form")!;
  const input = document.querySelector<HTMLInputElement>("#question")!;
  const kSel = document.querySelector<HTMLSelectElement>("#k")!;
  const nSel = document.querySelector<HTMLSelectElement>("#n-retrieve")!;
  const results = document.querySelector<HTMLElement>("#results")!;
  const panel = document.querySelector<HTMLElement>("#score-panel")!;
  const panelToggle = document.querySelector<HTMLInputElement>("#panel-toggle")!;
  const health = document.querySelector<HTMLElement>("#health")!;

  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const question = input.value; // sent verbatim: the server owns normalization
    if (!question) return;
    void runQuery(question, Number(kSel.value), Number(nSel.value), results, panel);
  });

  panelToggle.addEventListener("change", () => {
    panel.style.display = panelToggle.checked ? "" : "none";
  });

  fetch(`${apiBase()}/health`)
    .then((r) => r.json())
    .then((h: HealthResponse) => {
      health.innerHTML = renderHealth(h.chunks);
    })
    .catch(() => {
      health.innerHTML = renderError("service unreachable");
    });
}

if (typeof document !== "undefined" && document.querySelector("#search-form")) {
  bootstrap();
}
