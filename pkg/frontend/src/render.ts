/**
 * Pure HTML renderers for the search view.
 *
 * The UI is a plain view of the /query payload: results render in the order
 * received, the answer span is highlighted exactly at the character offsets
 * the server provides, and nothing is re-scored or re-ranked client-side.
 * Keeping these as string -> string functions lets tests assert the rendered
 * output without a browser.
 */
import type { Answer } from "./types.js";

export function escapeHtml(raw: string): string {
  return raw
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

/** Context with <mark> wrapped around [char_start, char_end), all segments escaped. */
export function renderHighlightedContext(answer: Answer): string {
  const { char_start, char_end } = answer.highlight;
  const ctx = answer.context;
  const before = escapeHtml(ctx.slice(0, char_start));
  const marked = escapeHtml(ctx.slice(char_start, char_end));
  const after = escapeHtml(ctx.slice(char_end));
  return `${before}<mark>${marked}</mark>${after}`;
}

const fmt = (x: number): string => x.toFixed(3);

export function renderAnswerCard(answer: Answer): string {
  return [
    `<article class="card" data-rank="${answer.rank}" data-chunk="${escapeHtml(answer.chunk_id)}">`,
    `<header><span class="rank">#${answer.rank}</span> ` +
      `<span class="answer">${escapeHtml(answer.answer_text)}</span></header>`,
    `<p class="doc">${escapeHtml(answer.title || answer.doc_id)} ` +
      `<span class="doc-id">(${escapeHtml(answer.doc_id)})</span></p>`,
    `<p class="context">${renderHighlightedContext(answer)}</p>`,
    `<footer class="scores">` +
      `<span>paragraph ${fmt(answer.paragraph_score)}</span>` +
      `<span>span ${fmt(answer.span_score)}</span>` +
      `<span>bm25 ${fmt(answer.bm25_score)}</span>` +
      `</footer>`,
    `</article>`,
  ].join("");
}

export function renderResults(answers: Answer[]): string {
  if (answers.length === 0) {
    return `<p class="empty">No results.</p>`;
  }
  return answers.map(renderAnswerCard).join("\n");
}

/** Side-by-side paragraph-score vs BM25 ranking panel. */
export function renderScorePanel(answers: Answer[]): string {
  const rows = answers
    .map(
      (a) =>
        `<tr><td>#${a.rank}</td><td>${escapeHtml(a.answer_text)}</td>` +
        `<td>${fmt(a.paragraph_score)}</td><td>${fmt(a.bm25_score)}</td></tr>`,
    )
    .join("");
  return (
    `<table class="score-panel"><thead><tr>` +
    `<th>rank</th><th>answer</th><th>paragraph</th><th>bm25</th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`
  );
}

export function renderError(message: string): string {
  return `<p class="error" role="alert">Request failed: ${escapeHtml(message)}</p>`;
}

export function renderHealth(chunks: number): string {
  return `<span class="health">index: ${chunks} chunks</span>`;
}
