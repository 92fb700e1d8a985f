"""Attention-map atlas: record per-head maps, label them, export heatmaps and a report.

Four features are computed per map (all in [0, 1]):

* ``forward``   above-diagonal mass inside prompt blocks, as a fraction of all mass
* ``vertical``  strongest single column inside a block, averaged over that block's rows
* ``band``      mass on cells with ``|i - j| <= 2``, as a fraction of all mass
* ``offset``    best ``k`` in 1..4 of the mean mass on ``(i, i + k)`` over rows where that
                cell lies in the same block

Labels follow a fixed precedence; thresholds live in :class:`Thresholds`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .errors import FormatError, ValidationError
from .masking import SENTINEL, SegmentedTokens, build_mask, check_mode, validate_segment_ids

LABELS = ("Preserved", "BlockSpecific", "NGram", "ForwardLooking", "Unclassified")
FEATURES = ("forward", "vertical", "band", "offset")
REPORT_FIELDS = ("layer", "head", "label") + FEATURES
ROW_TOL = 1e-5


@dataclass(frozen=True)
class Thresholds:
    offset: float = 0.5
    vertical: float = 0.5
    band: float = 0.6
    ngram_forward: float = 0.05
    preserved_forward: float = 0.02
    max_offset: int = 4
    band_width: int = 2


@dataclass(frozen=True)
class AttentionRecord:
    layer: int
    head: int
    map: torch.Tensor
    segment_ids: tuple[int, ...]
    mode: str = "mas"

    def __post_init__(self):
        m = torch.as_tensor(self.map, dtype=torch.float64)
        object.__setattr__(self, "map", m)
        object.__setattr__(self, "segment_ids", tuple(int(s) for s in self.segment_ids))
        check_mode(self.mode)
        n = len(self.segment_ids)
        if n == 0:
            raise ValidationError("attention map is empty")
        if m.shape != (n, n):
            raise ValidationError(f"map shape {tuple(m.shape)} does not match {n} segment ids")
        validate_segment_ids(self.segment_ids)
        if not bool(torch.isfinite(m).all()) or bool((m < 0).any()):
            raise ValidationError("attention map has negative or non-finite entries")
        if not torch.allclose(m.sum(dim=1), torch.ones(n, dtype=m.dtype), atol=ROW_TOL, rtol=0):
            raise ValidationError("attention map rows must sum to 1")
        allowed = build_mask(self.segment_ids, self.mode).allowed
        if bool(m.masked_select(~allowed).ne(0).any()):
            raise ValidationError(f"attention map puts mass on cells the {self.mode} mask forbids")

    @property
    def n(self) -> int:
        return len(self.segment_ids)


@dataclass(frozen=True)
class PatternLabel:
    label: str
    scores: dict = field(default_factory=dict)


def _same_block(segment_ids: Sequence[int]) -> torch.Tensor:
    s = torch.tensor(segment_ids)
    return (s[:, None] == s[None, :]) & (s[:, None] != SENTINEL)


def features(rec: AttentionRecord, th: Thresholds = Thresholds()) -> dict[str, float]:
    a, n = rec.map, rec.n
    block = _same_block(rec.segment_ids)
    i = torch.arange(n)
    upper = i[None, :] > i[:, None]
    forward = float(a[block & upper].sum()) / n

    vertical = 0.0
    ids = torch.tensor(rec.segment_ids)
    for s in sorted(set(rec.segment_ids) - {SENTINEL}):
        rows = (ids == s).nonzero().flatten()
        if len(rows) < 2:
            continue
        sub = a[rows][:, rows]
        vertical = max(vertical, float(sub.mean(dim=0).max()))

    band = float(a[(i[:, None] - i[None, :]).abs() <= th.band_width].sum()) / n

    offset = 0.0
    for k in range(1, th.max_offset + 1):
        if k >= n:
            break
        r = i[: n - k]
        ok = block[r, r + k]
        if bool(ok.any()):
            offset = max(offset, float(a[r[ok], r[ok] + k].mean()))
    return {"forward": forward, "vertical": vertical, "band": band, "offset": offset}


def decide(scores: dict[str, float], th: Thresholds = Thresholds()) -> str:
    if scores["offset"] > th.offset:
        return "ForwardLooking"
    if scores["vertical"] > th.vertical:
        return "BlockSpecific"
    if scores["band"] > th.band and scores["forward"] > th.ngram_forward:
        return "NGram"
    if scores["forward"] < th.preserved_forward:
        return "Preserved"
    return "Unclassified"


def classify(rec: AttentionRecord, th: Thresholds = Thresholds()) -> PatternLabel:
    scores = features(rec, th)
    return PatternLabel(decide(scores, th), scores)


def record_attention(weights, config, seg: SegmentedTokens, mode: str, adapters=None) -> list[AttentionRecord]:
    """Run one forward pass and wrap every head's map as a record."""
    from .model import forward

    _, maps = forward(torch.tensor(seg.token_ids), build_mask(seg, mode), weights, config,
                      record_attention=True, adapters=adapters)
    out = []
    for layer, probs in enumerate(maps):
        for head in range(probs.shape[0]):
            m = probs[head].to(torch.float64)
            m = m / m.sum(dim=1, keepdim=True)
            out.append(AttentionRecord(layer, head, m, seg.segment_ids, mode))
    return out


def pgm_pixels(a: torch.Tensor) -> bytes:
    q = torch.floor(a.to(torch.float64) * 255 + 0.5).clamp(0, 255).to(torch.uint8)
    return bytes(q.flatten().tolist())


def boundaries(segment_ids: Sequence[int]) -> list[int]:
    return [i for i in range(1, len(segment_ids)) if segment_ids[i] != segment_ids[i - 1]]


def export_heatmap(rec: AttentionRecord, path: str | Path) -> tuple[Path, Path]:
    """Write ``rec`` as a binary PGM plus a JSON sidecar with the segment boundaries."""
    path = Path(path)
    n = rec.n
    path.write_bytes(f"P5\n{n} {n}\n255\n".encode() + pgm_pixels(rec.map))
    side = path.with_suffix(".json")
    side.write_text(json.dumps({
        "layer": rec.layer, "head": rec.head, "mode": rec.mode, "n": n,
        "segment_ids": list(rec.segment_ids), "boundaries": boundaries(rec.segment_ids),
    }, indent=1))
    return path, side


def read_pgm(path: str | Path) -> torch.Tensor:
    """Parse a P5 file written by :func:`export_heatmap`; values scaled back to [0, 1]."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError(f"{path}: not a P5 greyscale image")
    w, h = (int(x) for x in parts[1].split())
    if len(parts[3]) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {len(parts[3])}")
    return torch.tensor(list(parts[3]), dtype=torch.float64).reshape(h, w) / 255


def report(records: Iterable[AttentionRecord], out_dir: str | Path, th: Thresholds = Thresholds(),
           heatmaps: bool = False) -> Path:
    """One CSV row per (layer, head), sorted; optionally a heatmap per head."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = sorted(records, key=lambda r: (r.layer, r.head))
    path = out / "report.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for rec in recs:
            lab = classify(rec, th)
            w.writerow([rec.layer, rec.head, lab.label] + [repr(lab.scores[f]) for f in FEATURES])
            if heatmaps:
                export_heatmap(rec, out / f"layer{rec.layer}_head{rec.head}.pgm")
    return path


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["layer"], r["head"] = int(r["layer"]), int(r["head"])
        for f in FEATURES:
            r[f] = float(r[f])
    return rows


# Fixture corpus: one constructed map per pattern at three sizes.

FIXTURE_SIZES = (12, 24, 48)


def fixture_layout(n: int) -> tuple[int, ...]:
    """System block of n/2, user block of n/3, the rest generated."""
    sys_len, user_len = n // 2, n // 3
    return (0,) * sys_len + (1,) * user_len + (SENTINEL,) * (n - sys_len - user_len)


def _causal_uniform(n: int) -> torch.Tensor:
    m = torch.ones(n, n, dtype=torch.float64).tril()
    return m / m.sum(dim=1, keepdim=True)


def _rows_normalized(m: torch.Tensor) -> torch.Tensor:
    return m / m.sum(dim=1, keepdim=True)


def fixture_map(pattern: str, segment_ids: Sequence[int]) -> torch.Tensor:
    n = len(segment_ids)
    block = _same_block(segment_ids)
    ids = list(segment_ids)
    if pattern == "Preserved":
        return _causal_uniform(n)
    if pattern == "ForwardLooking":
        m = torch.zeros(n, n, dtype=torch.float64)
        for i in range(n):
            if i + 1 < n and block[i, i + 1]:
                m[i, i + 1] = 1.0
            else:
                m[i, : i + 1] = 1.0 / (i + 1)
        return m
    if pattern == "BlockSpecific":
        # every row of block 1 looks at the block's first token
        m = _causal_uniform(n)
        rows = [i for i, s in enumerate(ids) if s == 1]
        for i in rows:
            m[i] = 0.0
            m[i, rows[0]] = 1.0
        return m
    if pattern == "NGram":
        m = torch.zeros(n, n, dtype=torch.float64)
        for i in range(n):
            for j in (i - 1, i, i + 1):
                if 0 <= j < n and (j <= i or block[i, j]):
                    m[i, j] = 1.0
        return _rows_normalized(m)
    raise ValidationError(f"no fixture for pattern {pattern!r}")


def fixture_corpus() -> list[tuple[str, AttentionRecord]]:
    out = []
    for pattern in ("Preserved", "BlockSpecific", "NGram", "ForwardLooking"):
        for k, n in enumerate(FIXTURE_SIZES):
            seg = fixture_layout(n)
            out.append((pattern, AttentionRecord(0, k, fixture_map(pattern, seg), seg, "mas")))
    return out
