"""Low-rank adapters on frozen projection matrices.

An adapter on ``W`` (``d_in x d_out``) adds ``(alpha / r) * A @ B`` with
``A: d_in x r`` and ``B: r x d_out``. ``B`` starts at zero, so a freshly
attached model computes exactly what the base model computes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import torch

from . import numerics as nx
from .errors import ConfigError, DimensionError, FormatError, StateError
from .model import ModelWeights

TARGETS = ("w_q", "w_k", "w_v", "w_u", "w_d")
_ALIASES = {"q": "w_q", "k": "w_k", "v": "w_v", "u": "w_u", "up": "w_u", "d": "w_d", "down": "w_d"}

AdapterSet = dict[tuple[int, str], "LoraAdapter"]


def normalize_target(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in TARGETS:
        raise ConfigError(f"unknown LoRA target {name!r}; choose from {TARGETS}")
    return key


@dataclass
class LoraAdapter:
    layer: int
    matrix: str
    A: torch.Tensor
    B: torch.Tensor
    alpha: float
    dropout_p: float = 0.0
    merged: bool = False

    @property
    def r(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @property
    def name(self) -> str:
        return f"lora.{self.layer}.{self.matrix}"

    def delta(self, x: torch.Tensor, train: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
        if train and self.dropout_p > 0:
            keep = torch.rand(x.shape, generator=generator) >= self.dropout_p
            x = x * keep.to(x.dtype) / (1.0 - self.dropout_p)
        return nx.matmul(nx.matmul(x, self.A), self.B) * self.scale

    def n_params(self) -> int:
        return self.A.numel() + self.B.numel()


def attach(weights: ModelWeights, targets: Iterable[str], r: int, alpha: float, seed: int = 0,
           dropout_p: float = 0.0, std: float = 0.02) -> AdapterSet:
    """Freeze ``weights`` and create one adapter per (layer, target)."""
    if r < 1:
        raise ConfigError("LoRA rank must be >= 1")
    names = sorted({normalize_target(t) for t in targets}, key=TARGETS.index)
    gen = torch.Generator().manual_seed(seed)
    weights.requires_grad_(False)
    adapters: AdapterSet = {}
    for li, lw in enumerate(weights.layers):
        for name in names:
            w = getattr(lw, name)
            d_in, d_out = w.shape
            if r >= min(d_in, d_out):
                warnings.warn(f"LoRA rank {r} is not below min({d_in}, {d_out}) for layer {li} {name}", stacklevel=2)
            a = (torch.randn(d_in, r, generator=gen, dtype=torch.float64) * std).to(w.dtype).requires_grad_(True)
            b = torch.zeros(r, d_out, dtype=w.dtype).requires_grad_(True)
            adapters[(li, name)] = LoraAdapter(li, name, a, b, float(alpha), dropout_p)
    return adapters


def trainable_parameters(adapters: Mapping[tuple[int, str], LoraAdapter]) -> list[torch.Tensor]:
    out = []
    for key in sorted(adapters):
        out.extend((adapters[key].A, adapters[key].B))
    return out


def effective_weight(w: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    if w.shape != (adapter.A.shape[0], adapter.B.shape[1]):
        raise DimensionError(f"adapter {tuple(adapter.A.shape)}x{tuple(adapter.B.shape)} does not fit weight {tuple(w.shape)}")
    return w + nx.matmul(adapter.A, adapter.B) * adapter.scale


def merge(weights: ModelWeights, adapters: Mapping[tuple[int, str], LoraAdapter]) -> ModelWeights:
    """Fold adapters into a detached copy of ``weights``; adapters become unusable."""
    for ad in adapters.values():
        if ad.merged:
            raise StateError(f"{ad.name} was already merged")
    merged = weights.clone()
    with torch.no_grad():
        for (li, name), ad in adapters.items():
            lw = merged.layers[li]
            setattr(lw, name, effective_weight(getattr(lw, name), ad).detach())
    for ad in adapters.values():
        ad.merged = True
    return merged


def adapter_tensors(adapters: Mapping[tuple[int, str], LoraAdapter]) -> dict[str, torch.Tensor]:
    out = {}
    for key in sorted(adapters):
        ad = adapters[key]
        out[f"{ad.name}.A"] = ad.A.detach()
        out[f"{ad.name}.B"] = ad.B.detach()
    return out


def adapters_from_tensors(tensors: Mapping[str, torch.Tensor], alpha: float) -> AdapterSet:
    pairs: dict[tuple[int, str], dict[str, torch.Tensor]] = {}
    for key, t in tensors.items():
        parts = key.split(".")
        if len(parts) != 4 or parts[0] != "lora" or parts[3] not in ("A", "B"):
            raise FormatError(f"bad adapter tensor name {key!r}")
        pairs.setdefault((int(parts[1]), normalize_target(parts[2])), {})[parts[3]] = t
    out: AdapterSet = {}
    for (li, name), ab in sorted(pairs.items()):
        if set(ab) != {"A", "B"}:
            raise FormatError(f"adapter lora.{li}.{name} is missing a factor")
        out[(li, name)] = LoraAdapter(li, name, ab["A"], ab["B"], alpha)
    return out


def save_adapter_meta(path: str | Path, adapters: Mapping[tuple[int, str], LoraAdapter]) -> None:
    first = next(iter(adapters.values()), None)
    meta = {
        "alpha": None if first is None else first.alpha,
        "r": None if first is None else first.r,
        "targets": sorted({name for _, name in adapters}, key=TARGETS.index),
    }
    Path(path).write_text(json.dumps(meta, indent=2))


def save_adapters(path: str | Path, adapters: Mapping[tuple[int, str], LoraAdapter]) -> None:
    """MASW1 factors at ``path`` plus a ``.json`` sidecar carrying alpha, r and targets."""
    if not adapters:
        raise ConfigError("no adapters to save")
    first = next(iter(adapters.values()))
    dtype = "f64" if first.A.dtype == torch.float64 else "f32"
    nx.save_tensors(path, adapter_tensors(adapters), dtype)
    save_adapter_meta(Path(path).with_suffix(".json"), adapters)


def load_adapters(path: str | Path) -> AdapterSet:
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not meta_path.exists():
        raise FormatError(f"missing adapter metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    tensors, _ = nx.load_tensors(path)
    return adapters_from_tensors(tensors, meta["alpha"])
