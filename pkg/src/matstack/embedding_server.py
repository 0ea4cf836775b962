"""Reference HTTP server for the ``/embed`` embedder protocol.

Serves any :class:`~matstack.similarity_eval.Embedder` so that the remote client can be
exercised against the builtin embedder (or a real backbone wrapped the same way)::

    matstack embed-server --port 8077
    MP__EVAL__EMBEDDER=http://127.0.0.1:8077 matstack eval ...
"""

from __future__ import annotations

import logging
from typing import Optional

from fastapi import FastAPI, HTTPException, Request

from .errors import DimensionError
from .material_io import decode_png_bytes
from .similarity_eval import BuiltinEmbedder, Embedder

logger = logging.getLogger(__name__)


def create_embedding_app(embedder: Optional[Embedder] = None) -> FastAPI:
    """Build the FastAPI app; ``POST /embed`` takes raw PNG bytes, ``GET /health`` reports the dimension."""
    embedder = embedder or BuiltinEmbedder()
    app = FastAPI(title="matstack embedder")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "dim": embedder.dimension}

    @app.post("/embed")
    async def embed(request: Request) -> dict:
        content_type = request.headers.get("content-type", "")
        if not content_type.startswith("image/png"):
            raise HTTPException(status_code=415, detail="Body must be image/png")
        body = await request.body()
        try:
            image = decode_png_bytes(body)
        except Exception as e:
            logger.warning(f"Rejected undecodable PNG body ({len(body)} bytes): {e}")
            raise HTTPException(status_code=400, detail="Body is not a decodable PNG") from e
        try:
            vector = embedder.embed(image)
        except DimensionError as e:
            raise HTTPException(status_code=422, detail=str(e)) from e
        return {"vector": [float(v) for v in vector], "dim": int(len(vector))}

    return app


def run_embedding_server(
    embedder: Optional[Embedder] = None,
    host: str = "127.0.0.1",
    port: int = 8077,
    log_level: str = "info",
) -> None:
    import uvicorn

    logger.info(f"Serving embeddings on http://{host}:{port}/embed")
    uvicorn.run(create_embedding_app(embedder), host=host, port=port, log_level=log_level.lower())
