"""Causal and segment-based (MAS) attention masks.

Query ``i`` may attend key ``j`` when ``j <= i``. Under MAS it may additionally
attend any ``j`` carrying the same prompt segment id, so each prompt segment is
fully bidirectional while generated tokens (segment id ``SENTINEL``) stay causal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import ValidationError
from .numerics import additive_mask

SENTINEL = -1
MODES = ("causal", "mas")
ROLES = ("system", "user", "assistant")


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def validate_segment_ids(segment_ids: Sequence[int]) -> None:
    """Prompt segments must be contiguous runs with non-decreasing ids."""
    last = None
    closed: set[int] = set()
    prev = None
    for pos, s in enumerate(segment_ids):
        if s < SENTINEL:
            raise ValidationError(f"segment id {s} at position {pos} is negative and not the sentinel")
        if s != SENTINEL:
            if s != prev and s in closed:
                raise ValidationError(f"segment {s} is not contiguous (resumes at position {pos})")
            if last is not None and s < last:
                raise ValidationError(f"segment ids decrease at position {pos} ({last} -> {s})")
            last = s
        if prev is not None and prev != SENTINEL and s != prev:
            closed.add(prev)
        prev = s


@dataclass(frozen=True)
class SegmentedTokens:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    roles: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        object.__setattr__(self, "segment_ids", tuple(int(s) for s in self.segment_ids))
        object.__setattr__(self, "roles", tuple(self.roles))
        n = len(self.token_ids)
        if len(self.segment_ids) != n or len(self.roles) != n:
            raise ValidationError(
                f"length mismatch: {n} tokens, {len(self.segment_ids)} segment ids, {len(self.roles)} roles"
            )
        for pos, (s, r) in enumerate(zip(self.segment_ids, self.roles)):
            if r not in ROLES:
                raise ValidationError(f"unknown role {r!r} at position {pos}")
            if (r == "assistant") != (s == SENTINEL):
                raise ValidationError(f"position {pos}: role {r} is inconsistent with segment id {s}")
        validate_segment_ids(self.segment_ids)

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def prefill_len(self) -> int:
        """Number of leading prompt tokens (up to the first generated token)."""
        for pos, s in enumerate(self.segment_ids):
            if s == SENTINEL:
                return pos
        return len(self.segment_ids)

    def slice(self, start: int, stop: int | None = None) -> "SegmentedTokens":
        return SegmentedTokens(self.token_ids[start:stop], self.segment_ids[start:stop], self.roles[start:stop])

    def __add__(self, other: "SegmentedTokens") -> "SegmentedTokens":
        return SegmentedTokens(
            self.token_ids + other.token_ids,
            self.segment_ids + other.segment_ids,
            self.roles + other.roles,
        )

    @classmethod
    def from_segments(cls, segment_ids: Sequence[int], token_ids: Sequence[int] | None = None) -> "SegmentedTokens":
        """Build from segment ids alone; roles are inferred (segment 0 is system)."""
        roles = ["assistant" if s == SENTINEL else ("system" if s == 0 else "user") for s in segment_ids]
        if token_ids is None:
            token_ids = [0] * len(segment_ids)
        return cls(tuple(token_ids), tuple(segment_ids), tuple(roles))


@dataclass(frozen=True)
class AttnMask:
    allowed: torch.Tensor = field(repr=False)

    def __post_init__(self):
        a = self.allowed
        if a.dtype != torch.bool or a.dim() != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError("AttnMask needs a square boolean matrix")

    @property
    def n(self) -> int:
        return self.allowed.shape[0]

    def additive(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return additive_mask(self.allowed, dtype)

    def rows(self) -> list[str]:
        return ["".join("1" if v else "0" for v in row) for row in self.allowed.tolist()]

    def __eq__(self, other) -> bool:
        return isinstance(other, AttnMask) and torch.equal(self.allowed, other.allowed)

    def __hash__(self):
        return hash(tuple(self.rows()))


def _ids(seg: SegmentedTokens | Sequence[int]) -> tuple[int, ...]:
    if isinstance(seg, SegmentedTokens):
        return seg.segment_ids
    ids = tuple(int(s) for s in seg)
    validate_segment_ids(ids)
    return ids


def build_rows(segment_ids: Sequence[int], start: int, mode: str) -> torch.Tensor:
    """Rows ``start..n-1`` of the full mask, shape ``(n - start, n)``."""
    check_mode(mode)
    s = torch.as_tensor(segment_ids, dtype=torch.long)
    n = s.shape[0]
    q = torch.arange(start, n).unsqueeze(1)
    k = torch.arange(n).unsqueeze(0)
    allowed = k <= q
    if mode == "mas":
        sq = s[start:].unsqueeze(1)
        allowed = allowed | ((sq == s.unsqueeze(0)) & (sq != SENTINEL))
    return allowed


def build_mask(seg: SegmentedTokens | Sequence[int], mode: str) -> AttnMask:
    ids = _ids(seg)
    if not ids:
        raise ValidationError("cannot build a mask for an empty sequence")
    return AttnMask(build_rows(ids, 0, mode))


def decode_mask_row(cache_len: int) -> torch.Tensor:
    """A generated token sees every cached position and itself."""
    if cache_len < 0:
        raise ValidationError("cache_len must be non-negative")
    return torch.ones(cache_len + 1, dtype=torch.bool)


def unify_segments(seg: SegmentedTokens) -> SegmentedTokens:
    """Collapse each run of prompt tokens into a single segment.

    For a single-turn chat this maps every prompt token to segment 0. Prompt runs
    separated by generated tokens (later turns) keep distinct ids so the result
    remains contiguous.
    """
    out: list[int] = []
    run = -1
    prev = SENTINEL
    for s in seg.segment_ids:
        if s == SENTINEL:
            out.append(SENTINEL)
        else:
            if prev == SENTINEL:
                run += 1
            out.append(run)
        prev = s
    return SegmentedTokens(seg.token_ids, tuple(out), seg.roles)


def mask_oracle(seg: SegmentedTokens | Sequence[int], mode: str) -> AttnMask:
    """Cell-by-cell evaluation of the mask predicate, for cross-checking build_mask."""
    ids = list(seg.segment_ids if isinstance(seg, SegmentedTokens) else seg)
    n = len(ids)
    cells = [[False] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            visible = j <= i
            if mode == "mas" and ids[i] != SENTINEL and ids[i] == ids[j]:
                visible = True
            cells[i][j] = visible
    return AttnMask(torch.tensor(cells, dtype=torch.bool).reshape(n, n))


def to_pgm(mask: AttnMask) -> bytes:
    """Binary PGM of a mask: 255 where attention is allowed, 0 where masked."""
    n = mask.n
    pixels = (mask.allowed.to(torch.uint8) * 255).numpy().tobytes()
    return f"P5\n{n} {n}\n255\n".encode("ascii") + pixels
