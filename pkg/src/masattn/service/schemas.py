from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

Mode = Literal["causal", "mas"]


class MaskRequest(BaseModel):
    segment_ids: list[int] = Field(min_length=1)
    mode: Mode = "mas"


class MaskResponse(BaseModel):
    n: int
    rows: list[str]


class GenerateRequest(BaseModel):
    system: str = ""
    user: str = Field(min_length=1)
    mode: Mode = "mas"
    max_new: int = Field(default=16, ge=0, le=256)


class GenerateResponse(BaseModel):
    mode: Mode
    tokens: list[int]
    text: str
    system_cache_hit: bool


class AtlasRequest(BaseModel):
    system: str = ""
    user: str = Field(min_length=1)
    mode: Mode = "mas"


class HeadLabel(BaseModel):
    layer: int
    head: int
    label: str
    scores: dict[str, float]


class AtlasResponse(BaseModel):
    heads: list[HeadLabel]


class ErrorResponse(BaseModel):
    code: str
    detail: str
