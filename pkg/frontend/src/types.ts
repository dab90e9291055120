/** Wire types mirroring the query service's /query and /health responses. */

export interface Highlight {
  char_start: number;
  char_end: number;
}

export interface Answer {
  rank: number;
  answer_text: string;
  paragraph_score: number;
  span_score: number;
  bm25_score: number;
  doc_id: string;
  chunk_id: string;
  title: string;
  highlight: Highlight;
  context: string;
}

export interface QueryResponse {
  answers: Answer[];
}

export interface HealthResponse {
  status: string;
  chunks: number;
}
