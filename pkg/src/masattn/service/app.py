"""FastAPI application around a loaded base model (plus optional adapters).

System prompts are prefilled once per (mode, text) and the snapshot cache is
reused for every later request with the same system prompt.
"""

from __future__ import annotations

from collections import OrderedDict
from threading import Lock

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import atlas as at
from ..chatdata import ASST_BEGIN, EOS, detokenize, render_system, render_user
from ..engine import KVCache, generate, snapshot_system_cache
from ..errors import MasError
from ..lora import load_adapters
from ..masking import SENTINEL, SegmentedTokens, build_mask
from ..model import load_model
from .schemas import (AtlasRequest, AtlasResponse, ErrorResponse, GenerateRequest, GenerateResponse, HeadLabel,
                      MaskRequest, MaskResponse)

ASST_HEADER = SegmentedTokens((ASST_BEGIN,), (SENTINEL,), ("assistant",))


class SnapshotStore:
    """Small LRU of system-prompt caches keyed by (mode, system text)."""

    def __init__(self, capacity: int = 32):
        self.capacity = capacity
        self._items: OrderedDict[tuple[str, str], KVCache] = OrderedDict()
        self._lock = Lock()
        self.hits = 0

    def get_or_build(self, key, build) -> tuple[KVCache, bool]:
        with self._lock:
            if key in self._items:
                self._items.move_to_end(key)
                self.hits += 1
                return self._items[key], True
        cache = build()
        with self._lock:
            self._items[key] = cache
            while len(self._items) > self.capacity:
                self._items.popitem(last=False)
        return cache, False


def create_app(weights_path, adapter_path=None, model=None) -> FastAPI:
    """``model`` may be a preloaded ``(weights, config, adapters)`` triple."""
    if model is None:
        weights, config, _ = load_model(weights_path)
        adapters = load_adapters(adapter_path) if adapter_path else None
    else:
        weights, config, adapters = model
    store = SnapshotStore()
    app = FastAPI(title="masattn", version="0.1.0")
    app.state.snapshots = store

    @app.exception_handler(MasError)
    async def _contract_error(_, exc: MasError):
        body = ErrorResponse(code=exc.code, detail=str(exc))
        return JSONResponse(status_code=422, content=body.model_dump())

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "d": config.d, "layers": config.n_layers, "adapters": bool(adapters)}

    @app.post("/mask", response_model=MaskResponse)
    def mask(req: MaskRequest) -> MaskResponse:
        m = build_mask(req.segment_ids, req.mode)
        return MaskResponse(n=m.n, rows=m.rows())

    @app.post("/generate", response_model=GenerateResponse)
    def gen(req: GenerateRequest) -> GenerateResponse:
        sys_seg = render_system(req.system)
        cache, hit = store.get_or_build(
            (req.mode, req.system), lambda: snapshot_system_cache(sys_seg, weights, config, req.mode, adapters))
        ids = generate(render_user(req.user) + ASST_HEADER, weights, config, req.mode, req.max_new, EOS,
                       adapters, cache=cache)
        return GenerateResponse(mode=req.mode, tokens=ids, text=detokenize(ids, errors="replace"),
                                system_cache_hit=hit)

    @app.post("/atlas", response_model=AtlasResponse)
    def atlas(req: AtlasRequest) -> AtlasResponse:
        seg = render_system(req.system) + render_user(req.user) + ASST_HEADER
        heads = []
        for rec in at.record_attention(weights, config, seg, req.mode, adapters):
            lab = at.classify(rec)
            heads.append(HeadLabel(layer=rec.layer, head=rec.head, label=lab.label, scores=lab.scores))
        return AtlasResponse(heads=heads)

    return app
