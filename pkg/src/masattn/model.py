"""Decoder-only transformer: RoPE multi-head attention, SwiGLU MLP, pre-norm blocks.

The model is written functionally over plain weight containers so the same code
path serves full-sequence forward passes, cached prefill/decode and LoRA-adapted
training. Every attention call takes an explicit boolean mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import torch

from . import numerics as nx
from .errors import ConfigError, DimensionError, FormatError, ValidationError
from .masking import AttnMask

LAYER_MATRICES = ("w_q", "w_k", "w_v", "w_o", "w_u", "w_g", "w_d")
LAYER_VECTORS = ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    h: int = 4
    n_layers: int = 2
    d_m: int = 256
    vocab_size: int = 261
    max_seq: int = 256
    rope_theta: float = 10000.0
    ln_eps: float = 1e-5
    norm: str = "layernorm"
    tied: bool = False

    def __post_init__(self):
        for name in ("d", "h", "n_layers", "d_m", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d % self.h:
            raise ConfigError(f"d={self.d} is not divisible by h={self.h}")
        if self.head_dim % 2:
            raise ConfigError(f"head dim {self.head_dim} must be even for RoPE")
        if self.norm not in ("layernorm", "rmsnorm"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.ln_eps <= 0 or self.rope_theta <= 0:
            raise ConfigError("ln_eps and rope_theta must be positive")

    @property
    def head_dim(self) -> int:
        return self.d // self.h

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LayerWeights:
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    w_u: torch.Tensor
    w_g: torch.Tensor
    w_d: torch.Tensor
    ln1_gamma: torch.Tensor
    ln1_beta: torch.Tensor
    ln2_gamma: torch.Tensor
    ln2_beta: torch.Tensor


@dataclass
class ModelWeights:
    tok_emb: torch.Tensor
    layers: list[LayerWeights]
    lnf_gamma: torch.Tensor
    lnf_beta: torch.Tensor
    unembed: torch.Tensor | None = None  # None when tied to tok_emb

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    def output_matrix(self) -> torch.Tensor:
        return self.tok_emb.t() if self.unembed is None else self.unembed

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {"tok_emb": self.tok_emb}
        for i, lw in enumerate(self.layers):
            for name in LAYER_MATRICES + LAYER_VECTORS:
                out[f"layers.{i}.{name}"] = getattr(lw, name)
        out["lnf_gamma"] = self.lnf_gamma
        out["lnf_beta"] = self.lnf_beta
        if self.unembed is not None:
            out["unembed"] = self.unembed
        return out

    def parameters(self) -> list[torch.Tensor]:
        return list(self.named_tensors().values())

    def clone(self) -> "ModelWeights":
        return from_named_tensors({k: v.detach().clone() for k, v in self.named_tensors().items()})

    def requires_grad_(self, flag: bool = True) -> "ModelWeights":
        for t in self.parameters():
            t.requires_grad_(flag)
        return self


def from_named_tensors(tensors: Mapping[str, torch.Tensor]) -> ModelWeights:
    n_layers = 1 + max((int(k.split(".")[1]) for k in tensors if k.startswith("layers.")), default=-1)
    try:
        layers = [
            LayerWeights(**{name: tensors[f"layers.{i}.{name}"] for name in LAYER_MATRICES + LAYER_VECTORS})
            for i in range(n_layers)
        ]
        return ModelWeights(
            tok_emb=tensors["tok_emb"],
            layers=layers,
            lnf_gamma=tensors["lnf_gamma"],
            lnf_beta=tensors["lnf_beta"],
            unembed=tensors.get("unembed"),
        )
    except KeyError as exc:
        raise FormatError(f"weight file is missing tensor {exc}") from None


def check_weights(weights: ModelWeights, config: ModelConfig) -> None:
    d, dm, v = config.d, config.d_m, config.vocab_size
    if len(weights.layers) != config.n_layers:
        raise ConfigError(f"weights have {len(weights.layers)} layers, config says {config.n_layers}")
    expected = {"tok_emb": (v, d), "lnf_gamma": (d,), "lnf_beta": (d,)}
    if not config.tied:
        expected["unembed"] = (d, v)
    elif weights.unembed is not None:
        raise ConfigError("config is tied but weights carry an unembedding")
    shapes = {"w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
              "w_u": (d, dm), "w_g": (d, dm), "w_d": (dm, d)}
    for i in range(config.n_layers):
        for name, shape in shapes.items():
            expected[f"layers.{i}.{name}"] = shape
        for name in LAYER_VECTORS:
            expected[f"layers.{i}.{name}"] = (d,)
    named = weights.named_tensors()
    for name, shape in expected.items():
        if name not in named:
            raise ConfigError(f"missing weight {name}")
        if tuple(named[name].shape) != shape:
            raise DimensionError(f"{name} has shape {tuple(named[name].shape)}, expected {shape}")


def init_weights(config: ModelConfig, seed: int = 0, dtype: str | torch.dtype = "f32", std: float = 0.02) -> ModelWeights:
    dt = nx.resolve_dtype(dtype)
    gen = torch.Generator().manual_seed(seed)

    def normal(*shape):
        return (torch.randn(*shape, generator=gen, dtype=torch.float64) * std).to(dt)

    d, dm = config.d, config.d_m
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            w_q=normal(d, d), w_k=normal(d, d), w_v=normal(d, d), w_o=normal(d, d),
            w_u=normal(d, dm), w_g=normal(d, dm), w_d=normal(dm, d),
            ln1_gamma=torch.ones(d, dtype=dt), ln1_beta=torch.zeros(d, dtype=dt),
            ln2_gamma=torch.ones(d, dtype=dt), ln2_beta=torch.zeros(d, dtype=dt),
        ))
    return ModelWeights(
        tok_emb=normal(config.vocab_size, d),
        layers=layers,
        lnf_gamma=torch.ones(d, dtype=dt),
        lnf_beta=torch.zeros(d, dtype=dt),
        unembed=None if config.tied else normal(d, config.vocab_size),
    )


def save_model(path: str | Path, weights: ModelWeights, config: ModelConfig, extra: Mapping[str, torch.Tensor] | None = None) -> None:
    """Write ``path`` (MASW1) plus ``path`` with a ``.json`` suffix holding the config."""
    path = Path(path)
    tensors = dict(weights.named_tensors())
    if extra:
        tensors.update(extra)
    dtype = "f64" if weights.dtype == torch.float64 else "f32"
    nx.save_tensors(path, tensors, dtype)
    path.with_suffix(".json").write_text(config.to_json())


def load_model(path: str | Path) -> tuple[ModelWeights, ModelConfig, dict[str, torch.Tensor]]:
    """Returns (weights, config, extra tensors such as LoRA factors)."""
    path = Path(path)
    tensors, _ = nx.load_tensors(path)
    cfg_path = path.with_suffix(".json")
    if not cfg_path.exists():
        raise FormatError(f"missing model config {cfg_path}")
    config = ModelConfig.from_dict(json.loads(cfg_path.read_text()))
    base = {k: v for k, v in tensors.items() if not k.startswith("lora.")}
    extra = {k: v for k, v in tensors.items() if k.startswith("lora.")}
    weights = from_named_tensors(base)
    check_weights(weights, config)
    return weights, config, extra


def rope_apply(x: torch.Tensor, positions, theta: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive pairs ``(x[2k], x[2k+1])`` by ``pos * theta**(-2k/dh)``.

    ``x`` has shape ``(..., n, dh)``; ``positions`` has length ``n``.
    """
    dh = x.shape[-1]
    if dh % 2:
        raise ConfigError(f"RoPE needs an even head dim, got {dh}")
    pos = torch.as_tensor(positions, dtype=torch.float64)
    if pos.shape[-1] != x.shape[-2]:
        raise DimensionError(f"{pos.shape[-1]} positions for {x.shape[-2]} rows")
    inv_freq = theta ** (-torch.arange(0, dh, 2, dtype=torch.float64) / dh)
    angles = pos.unsqueeze(-1) * inv_freq
    cos, sin = angles.cos().to(x.dtype), angles.sin().to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return rotated.flatten(-2)


def _norm(x, gamma, beta, config: ModelConfig):
    if config.norm == "rmsnorm":
        return nx.rms_norm(x, gamma, config.ln_eps)
    return nx.layer_norm(x, gamma, beta, config.ln_eps)


def _project(x, w, adapter, train: bool, generator):
    out = nx.matmul(x, w)
    if adapter is not None and not adapter.merged:
        out = out + adapter.delta(x, train=train, generator=generator)
    return out


def _attention(xn, lw: LayerWeights, allowed, positions, config: ModelConfig, past=None,
               adapters=None, train=False, generator=None):
    """Multi-head attention over ``past`` keys/values plus the ``n`` new rows.

    ``xn``: (B, n, d) normalized input; ``allowed``: (B, n, past_len + n) boolean.
    Returns (output, (k_all, v_all), probs) with probs of shape (B, h, n, past_len + n).
    """
    adapters = adapters or {}
    b, n, _ = xn.shape
    h, dh = config.h, config.head_dim

    def heads(t):
        return t.reshape(b, n, h, dh).transpose(1, 2)

    q = heads(_project(xn, lw.w_q, adapters.get("w_q"), train, generator))
    k = heads(_project(xn, lw.w_k, adapters.get("w_k"), train, generator))
    v = heads(_project(xn, lw.w_v, adapters.get("w_v"), train, generator))
    q = rope_apply(q, positions, config.rope_theta)
    k = rope_apply(k, positions, config.rope_theta)
    if past is not None:
        k = torch.cat((past[0], k), dim=-2)
        v = torch.cat((past[1], v), dim=-2)
    if allowed.shape[-1] != k.shape[-2] or allowed.shape[-2] != n:
        raise DimensionError(f"mask shape {tuple(allowed.shape)} does not fit {n} queries over {k.shape[-2]} keys")
    scores = nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
    probs = nx.masked_softmax(scores, allowed.unsqueeze(1))
    ctx = nx.matmul(probs, v).transpose(1, 2).reshape(b, n, h * dh)
    return nx.matmul(ctx, lw.w_o), (k, v), probs


def _mlp(x, lw: LayerWeights, adapters=None, train=False, generator=None):
    adapters = adapters or {}
    up = nx.silu(_project(x, lw.w_u, adapters.get("w_u"), train, generator))
    gate = nx.matmul(x, lw.w_g)
    return _project(up * gate, lw.w_d, adapters.get("w_d"), train, generator)


def swiglu_mlp(x: torch.Tensor, lw: LayerWeights) -> torch.Tensor:
    return _mlp(x, lw)


def mha_forward(x: torch.Tensor, lw: LayerWeights, mask: AttnMask | torch.Tensor, positions, config: ModelConfig):
    """Single-sequence attention. Returns (output ``n x d``, maps ``h x n x n``)."""
    allowed = mask.allowed if isinstance(mask, AttnMask) else mask
    out, _, probs = _attention(x.unsqueeze(0), lw, allowed.unsqueeze(0), positions, config)
    return out[0], probs[0]


def block_forward(x: torch.Tensor, lw: LayerWeights, mask: AttnMask | torch.Tensor, positions, config: ModelConfig) -> torch.Tensor:
    allowed = mask.allowed if isinstance(mask, AttnMask) else mask
    out, _ = _block(x.unsqueeze(0), lw, allowed.unsqueeze(0), positions, config)
    return out[0]


def _block(x, lw, allowed, positions, config, past=None, adapters=None, train=False, generator=None, record=None):
    attn_out, kv, probs = _attention(_norm(x, lw.ln1_gamma, lw.ln1_beta, config), lw, allowed, positions,
                                     config, past, adapters, train, generator)
    if record is not None:
        record.append(probs.detach())
    x = x + attn_out
    x = x + _mlp(_norm(x, lw.ln2_gamma, lw.ln2_beta, config), lw, adapters, train, generator)
    return x, kv


def layer_adapters(adapters, layer: int) -> dict:
    if not adapters:
        return {}
    return {name: ad for (li, name), ad in adapters.items() if li == layer}


def run(tokens: torch.Tensor, allowed: torch.Tensor, weights: ModelWeights, config: ModelConfig,
        positions=None, past=None, adapters=None, train: bool = False, generator=None, record=None):
    """Batched core pass.

    tokens: (B, n) ids; allowed: (B, n, past_len + n); past: per-layer (k, v) or None.
    Returns (logits (B, n, V), new per-layer (k, v) including the past).
    """
    if tokens.dim() != 2:
        raise DimensionError("run expects a (B, n) token batch")
    n = tokens.shape[1]
    past_len = 0 if past is None else past[0][0].shape[-2]
    if positions is None:
        positions = torch.arange(past_len, past_len + n)
    if past_len + n > config.max_seq:
        raise ValidationError(f"sequence length {past_len + n} exceeds max_seq {config.max_seq}")
    if n == 0:
        raise ValidationError("empty token sequence")
    if int(tokens.min()) < 0 or int(tokens.max()) >= config.vocab_size:
        raise ValidationError(f"token id out of range [0, {config.vocab_size})")
    x = weights.tok_emb[tokens]
    new_kv = []
    # non-finite values propagate to the logits, so one check at the end suffices
    with nx.deferred_checks():
        for i, lw in enumerate(weights.layers):
            x, kv = _block(x, lw, allowed, positions, config, None if past is None else past[i],
                           layer_adapters(adapters, i), train, generator, record)
            new_kv.append(kv)
        x = _norm(x, weights.lnf_gamma, weights.lnf_beta, config)
        logits = nx.matmul(x, weights.output_matrix())
    return nx.check_finite(logits, "forward", force=True), new_kv


def forward(tokens, mask: AttnMask | torch.Tensor, weights: ModelWeights, config: ModelConfig,
            record_attention: bool = False, adapters=None, train: bool = False, generator=None):
    """Logits for a single sequence (``n x V``) or a batch (``B x n x V``).

    With ``record_attention`` returns ``(logits, maps)`` where ``maps[layer]`` holds
    the post-softmax attention of every head, shape ``(h, n, n)`` (batch axis kept
    for batched input).
    """
    toks = torch.as_tensor(tokens, dtype=torch.long)
    allowed = mask.allowed if isinstance(mask, AttnMask) else mask
    single = toks.dim() == 1
    if single:
        toks = toks.unsqueeze(0)
        allowed = allowed.unsqueeze(0)
    if allowed.shape[-1] != toks.shape[1]:
        raise DimensionError(f"mask of size {allowed.shape[-1]} for {toks.shape[1]} tokens")
    record = [] if record_attention else None
    logits, _ = run(toks, allowed, weights, config, adapters=adapters, train=train, generator=generator, record=record)
    if single:
        logits = logits[0]
        if record is not None:
            record = [r[0] for r in record]
    return (logits, record) if record_attention else logits
