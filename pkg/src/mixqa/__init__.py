"""mixqa: open-domain question answering over a BM25 index with a shared
multi-task reader that re-ranks paragraphs and extracts answer spans."""

__version__ = "0.1.0"
