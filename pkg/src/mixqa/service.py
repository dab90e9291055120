"""HTTP query service: loads one index artifact and one checkpoint at
startup, then serves read-only answers.

POST /query {"question": "...", "n_retrieve": 100, "k": 3} ->
  {"answers": [{rank, answer_text, paragraph_score, span_score, bm25_score,
                doc_id, chunk_id, title, highlight: {char_start, char_end},
                context}]}
GET /health -> {"status": "ok", "chunks": N}

Malformed requests get 400; requests before startup finishes get 503.
"""
from __future__ import annotations

import json
import os
from contextlib import asynccontextmanager
from dataclasses import dataclass, fields
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import pipeline
from .encoder import ModelParameters, Vocab, load_checkpoint
from .retriever import IndexArtifact, load_artifact

CONFIG_ENV_VAR = "MIXQA_CONFIG"


@dataclass
class ServiceConfig:
    index_path: str
    checkpoint_path: str
    host: str = "127.0.0.1"
    port: int = 8765
    n_retrieve: int = 100
    k: int = 3
    max_answer_len: int = 30

    def __post_init__(self) -> None:
        if not 1 <= self.k <= self.n_retrieve:
            raise ValueError(f"need 1 <= k <= n_retrieve, got k={self.k} n_retrieve={self.n_retrieve}")


def load_service_config(overrides: dict | None = None) -> ServiceConfig:
    """Config from the MIXQA_CONFIG JSON file (if set), then CLI overrides."""
    data: dict = {}
    cfg_path = os.environ.get(CONFIG_ENV_VAR)
    if cfg_path:
        data.update(json.loads(Path(cfg_path).read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    known = {f.name for f in fields(ServiceConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ServiceConfig(**data)


@dataclass
class Engine:
    artifact: IndexArtifact
    params: ModelParameters
    vocab: Vocab
    config: ServiceConfig

    def query(self, question: str, n_retrieve: int, k: int) -> list[dict]:
        answers = pipeline.answer(
            question, n_retrieve, k, self.params, self.vocab, self.artifact,
            max_answer_len=self.config.max_answer_len,
        )
        return [
            {
                "rank": a.rank,
                "answer_text": a.answer_text,
                "paragraph_score": a.paragraph_score,
                "span_score": a.span_score,
                "bm25_score": a.bm25_score,
                "doc_id": a.doc_id,
                "chunk_id": a.chunk_id,
                "title": a.title,
                "highlight": {"char_start": a.highlight[0], "char_end": a.highlight[1]},
                "context": a.context,
            }
            for a in answers
        ]


def load_engine(config: ServiceConfig) -> Engine:
    artifact = load_artifact(config.index_path)
    params, vocab = load_checkpoint(config.checkpoint_path)
    if vocab is None:
        raise ValueError(f"missing vocabulary file next to {config.checkpoint_path}")
    return Engine(artifact=artifact, params=params, vocab=vocab, config=config)


class QueryRequest(BaseModel):
    question: str = Field(min_length=1)
    n_retrieve: int | None = Field(default=None, ge=1)
    k: int | None = Field(default=None, ge=1)


def create_app(config: ServiceConfig) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        app.state.engine = load_engine(config)
        yield
        app.state.engine = None

    app = FastAPI(title="mixqa", lifespan=lifespan)
    app.state.engine = None
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def engine() -> Engine:
        eng = app.state.engine
        if eng is None:
            raise HTTPException(status_code=503, detail="service is starting up")
        return eng

    @app.get("/health")
    async def health():
        return {"status": "ok", "chunks": engine().artifact.index.n_chunks}

    @app.post("/query")
    async def query(body: QueryRequest):
        eng = engine()
        n_retrieve = body.n_retrieve if body.n_retrieve is not None else config.n_retrieve
        k = body.k if body.k is not None else config.k
        if k > n_retrieve:
            raise HTTPException(status_code=400, detail=f"k={k} exceeds n_retrieve={n_retrieve}")
        return {"answers": eng.query(body.question, n_retrieve, k)}

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")
