"""Two-phase inference: segment-masked prefill into a KV cache, then causal decoding.

A cache is never modified in place: every operation returns a new ``KVCache``,
so a system-prompt snapshot can be shared by any number of sessions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from . import numerics as nx
from .errors import CacheError, FormatError, ValidationError
from .masking import SENTINEL, SegmentedTokens, build_rows, check_mode, decode_mask_row, validate_segment_ids
from .model import ModelConfig, ModelWeights, run


@dataclass(frozen=True)
class KVCache:
    """Per-layer keys (post-RoPE) and values, each shaped ``(1, h, cached_len, dh)``."""

    layers: tuple[tuple[torch.Tensor, torch.Tensor], ...]
    segment_ids: tuple[int, ...]
    mode: str
    config: ModelConfig

    @property
    def cached_len(self) -> int:
        return len(self.segment_ids)

    def layer_lengths(self) -> list[int]:
        return [k.shape[-2] for k, _ in self.layers]


def _check_compatible(cache: KVCache, config: ModelConfig) -> None:
    if cache.config != config:
        raise CacheError("cache was built for a different model config")


def extend(cache: KVCache | None, seg: SegmentedTokens, weights: ModelWeights, config: ModelConfig,
           mode: str | None = None, adapters=None) -> tuple[KVCache, torch.Tensor]:
    """Run ``seg`` against ``cache`` (or from scratch) and return (new cache, last-row logits).

    The new rows of the mask are exactly rows ``cached_len..`` of the mask over the
    concatenated sequence, so chaining ``extend`` calls reproduces a single pass.
    """
    if len(seg) == 0:
        raise ValidationError("nothing to process")
    if cache is None:
        mode = check_mode(mode or "mas")
        past, prev_ids = None, ()
    else:
        _check_compatible(cache, config)
        if mode is not None and mode != cache.mode:
            raise CacheError(f"cache mode is {cache.mode}, requested {mode}")
        mode = cache.mode
        past, prev_ids = list(cache.layers), cache.segment_ids
    ids = prev_ids + seg.segment_ids
    validate_segment_ids(ids)
    start = len(prev_ids)
    allowed = build_rows(ids, start, mode).unsqueeze(0)
    tokens = torch.tensor([seg.token_ids], dtype=torch.long)
    with torch.no_grad():
        logits, kv = run(tokens, allowed, weights, config, past=past, adapters=adapters)
    new = KVCache(tuple((k, v) for k, v in kv), ids, mode, config)
    return new, logits[0, -1]


def prefill(seg: SegmentedTokens, weights: ModelWeights, config: ModelConfig, mode: str = "mas",
            adapters=None) -> tuple[KVCache, torch.Tensor]:
    """Process a whole prompt at once. Returns (cache, next-token logits)."""
    if len(seg) == 0:
        raise ValidationError("empty prompt")
    if SENTINEL in seg.segment_ids:
        raise ValidationError("prefill takes prompt tokens only (found generated-phase tokens)")
    return extend(None, seg, weights, config, mode, adapters)


def decode_step(cache: KVCache, token_id: int, weights: ModelWeights, config: ModelConfig,
                adapters=None) -> tuple[torch.Tensor, KVCache]:
    """Feed one generated token. Returns (next-token logits, extended cache)."""
    _check_compatible(cache, config)
    if not 0 <= token_id < config.vocab_size:
        raise ValidationError(f"token id {token_id} outside vocabulary")
    allowed = decode_mask_row(cache.cached_len).reshape(1, 1, -1)
    tokens = torch.tensor([[token_id]], dtype=torch.long)
    with torch.no_grad():
        logits, kv = run(tokens, allowed, weights, config, past=list(cache.layers), adapters=adapters)
    new = KVCache(tuple((k, v) for k, v in kv), cache.segment_ids + (SENTINEL,), cache.mode, config)
    return logits[0, -1], new


def snapshot_system_cache(system_seg: SegmentedTokens, weights: ModelWeights, config: ModelConfig,
                          mode: str = "mas", adapters=None) -> KVCache:
    """Cache for a system prompt alone (segment 0), reusable across user prompts."""
    if len(system_seg) == 0:
        raise ValidationError("empty system prompt")
    if set(system_seg.segment_ids) != {0}:
        raise ValidationError("system snapshot needs a single segment with id 0")
    cache, _ = prefill(system_seg, weights, config, mode, adapters)
    return cache


def resume_with_user(cache: KVCache, user_seg: SegmentedTokens, weights: ModelWeights, config: ModelConfig,
                     adapters=None) -> tuple[KVCache, torch.Tensor]:
    """Append a user block to a cached prefix; only the user tokens are computed."""
    if len(user_seg) == 0:
        raise ValidationError("empty user prompt")
    if SENTINEL in user_seg.segment_ids:
        raise ValidationError("user block must not contain generated-phase tokens")
    prior = [s for s in cache.segment_ids if s != SENTINEL]
    if prior and min(user_seg.segment_ids) <= max(prior):
        raise CacheError(f"user segment id {min(user_seg.segment_ids)} collides with cached segment {max(prior)}")
    return extend(cache, user_seg, weights, config, adapters=adapters)


def _runs(seg: SegmentedTokens) -> list[SegmentedTokens]:
    """Split into maximal runs of prompt tokens and of generated tokens."""
    out, start = [], 0
    for i in range(1, len(seg) + 1):
        if i == len(seg) or (seg.segment_ids[i] == SENTINEL) != (seg.segment_ids[start] == SENTINEL):
            out.append(seg.slice(start, i))
            start = i
    return out


def generate(seg: SegmentedTokens, weights: ModelWeights, config: ModelConfig, mode: str = "mas",
             max_new: int = 64, stop_token: int | None = None, adapters=None,
             cache: KVCache | None = None) -> list[int]:
    """Greedy decoding.

    ``seg`` may end with forced generated-phase tokens (e.g. the assistant header);
    they are fed one by one after the prompt. With ``cache`` given, ``seg`` is
    processed as a continuation of the cached prefix. The stop token is not
    included in the output.
    """
    if max_new < 0:
        raise ValidationError("max_new must be >= 0")
    if max_new == 0:
        return []
    runs = _runs(seg)
    if cache is None and (not runs or runs[0].segment_ids[0] == SENTINEL):
        raise ValidationError("generation needs a prompt")
    logits = None
    for part in runs:
        if part.segment_ids[0] == SENTINEL:
            for tok in part.token_ids:
                logits, cache = decode_step(cache, tok, weights, config, adapters)
        else:
            cache, logits = extend(cache, part, weights, config, mode, adapters)
    out: list[int] = []
    while len(out) < max_new:
        nxt = int(torch.argmax(logits))
        if stop_token is not None and nxt == stop_token:
            break
        out.append(nxt)
        if len(out) == max_new or cache.cached_len >= config.max_seq:
            break
        logits, cache = decode_step(cache, nxt, weights, config, adapters)
    return out


def cache_key(weights_id: str, seg: SegmentedTokens, mode: str) -> str:
    h = hashlib.sha256()
    h.update(weights_id.encode())
    h.update(mode.encode())
    h.update(json.dumps(list(seg.token_ids)).encode())
    return h.hexdigest()[:32]


def save_cache(path: str | Path, cache: KVCache) -> None:
    path = Path(path)
    tensors = {}
    for i, (k, v) in enumerate(cache.layers):
        tensors[f"kv.{i}.k"] = k[0]
        tensors[f"kv.{i}.v"] = v[0]
    dtype = "f64" if cache.layers[0][0].dtype == torch.float64 else "f32"
    nx.save_tensors(path, tensors, dtype)
    meta = {"segment_ids": list(cache.segment_ids), "mode": cache.mode, "config": json.loads(cache.config.to_json())}
    path.with_suffix(".json").write_text(json.dumps(meta))


def load_cache(path: str | Path) -> KVCache:
    path = Path(path)
    tensors, _ = nx.load_tensors(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    config = ModelConfig.from_dict(meta["config"])
    layers = []
    for i in range(config.n_layers):
        try:
            layers.append((tensors[f"kv.{i}.k"].unsqueeze(0), tensors[f"kv.{i}.v"].unsqueeze(0)))
        except KeyError:
            raise FormatError(f"{path}: missing layer {i}") from None
    cache = KVCache(tuple(layers), tuple(meta["segment_ids"]), meta["mode"], config)
    if any(n != cache.cached_len for n in cache.layer_lengths()):
        raise FormatError(f"{path}: layer lengths disagree with segment metadata")
    return cache
