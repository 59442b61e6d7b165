"""FastAPI application exposing the embedding protocol.

Routes: ``POST /v1/embed/tokens``, ``POST /v1/embed/sentence``,
``GET /v1/health``. Request body: ``{"model": str, "texts": [str],
"kind": "tokens"|"sentence", "normalize": bool}``. Response items are
returned in request order; vectors share the model's dimension and are
unit-normalized when ``normalize`` is true.

Status codes: 400 for malformed requests, 422 when any text is empty,
503 when the named model is not loaded, 401 when a configured bearer
token is missing or wrong.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .backends import ModelNotLoaded


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _validate(body, route_kind: str):
    if not isinstance(body, dict):
        return None, _error(400, "request body must be a JSON object")
    model = body.get("model")
    if not isinstance(model, str) or not model:
        return None, _error(400, "field 'model' must be a non-empty string")
    texts = body.get("texts")
    if not isinstance(texts, list) or not texts or not all(isinstance(t, str) for t in texts):
        return None, _error(400, "field 'texts' must be a non-empty list of strings")
    kind = body.get("kind", route_kind)
    if kind != route_kind:
        return None, _error(400, f"kind {kind!r} does not match route kind {route_kind!r}")
    normalize = body.get("normalize", True)
    if not isinstance(normalize, bool):
        return None, _error(400, "field 'normalize' must be a boolean")
    if any(not t.strip() for t in texts):
        return None, _error(422, "texts must be non-empty")
    return {"model": model, "texts": texts, "normalize": normalize}, None


def create_app(registry: dict, auth_token: str | None = None) -> FastAPI:
    """Build the service around a ``name -> backend`` registry."""
    app = FastAPI(title="embed-service", version=__version__)

    def _authorized(request: Request) -> bool:
        if auth_token is None:
            return True
        return request.headers.get("Authorization") == f"Bearer {auth_token}"

    async def _embed(request: Request, kind: str) -> JSONResponse:
        if not _authorized(request):
            return _error(401, "missing or invalid bearer token")
        try:
            body = await request.json()
        except Exception:
            return _error(400, "request body is not valid JSON")
        params, failure = _validate(body, kind)
        if failure is not None:
            return failure
        backend = registry.get(params["model"])
        if backend is None:
            return _error(503, f"model {params['model']!r} is not loaded")

        items = []
        dim = None
        try:
            for text in params["texts"]:
                if kind == "tokens":
                    tokens, vectors = backend.embed_tokens(text, params["normalize"])
                    items.append({"tokens": tokens, "vectors": vectors.tolist()})
                    dim = int(vectors.shape[1])
                else:
                    vector = backend.embed_sentence(text, params["normalize"])
                    items.append({"vectors": [vector.tolist()]})
                    dim = int(vector.shape[0])
        except ModelNotLoaded as exc:
            return _error(503, str(exc))
        return JSONResponse({"model": params["model"], "dim": dim, "items": items})

    @app.post("/v1/embed/tokens")
    async def embed_tokens(request: Request):
        return await _embed(request, "tokens")

    @app.post("/v1/embed/sentence")
    async def embed_sentence(request: Request):
        return await _embed(request, "sentence")

    @app.get("/v1/health")
    async def health():
        return {"status": "ok", "models": sorted(registry)}

    return app
