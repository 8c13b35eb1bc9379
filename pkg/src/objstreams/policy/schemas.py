from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class ProfileIn(BaseModel):
    mode: Literal["whitelist", "blacklist"]
    classes: list[str]
    credential: Optional[str] = None


class ProfileOut(BaseModel):
    id: str
    mode: str
    classes: list[str]
    credential: str


class StreamRequest(BaseModel):
    classes: list[str]


class EpochKey(BaseModel):
    epoch: int
    first_segment: int
    last_segment: Optional[int] = None
    key: str = Field(description="128-bit key, hex")


class ClassKeys(BaseModel):
    class_: str = Field(alias="class")

    epochs: list[EpochKey]

    model_config = {"populate_by_name": True}


class GrantOut(BaseModel):
    consumer: str
    classes: list[ClassKeys]


class DenialOut(BaseModel):
    consumer: str
    denied: bool = True
    offending: list[str]


class RotateIn(BaseModel):
    first_segment: Optional[int] = None


class EpochOut(BaseModel):
    epoch: int
    first_segment: int
    last_segment: Optional[int] = None
    keys: Optional[dict[str, str]] = None


class WarrantIn(BaseModel):
    consumer: str
    class_: str = Field(alias="class")
    first_epoch: int
    last_epoch: int
    reason: str = ""

    model_config = {"populate_by_name": True}


class ErrorOut(BaseModel):
    error: str
    detail: str
