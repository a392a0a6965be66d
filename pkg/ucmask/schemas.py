"""Pydantic schemas used for document, configuration and HTTP validation."""
from __future__ import annotations

from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, strict=True)


class GeneratorDoc(_Document):
    id: str
    bus: str
    c: float
    c_nl: float
    c_su: float
    p_min: float
    p_max: float
    ut: int
    dt: int
    r_hr: float
    r_su: float
    r_sd: float
    u0: int
    p0: float
    init_duration: int


class LineDoc(_Document):
    id: str
    from_bus: str
    to_bus: str
    b: float
    f_max: float


class InstanceDoc(_Document):
    buses: List[str]
    ref_bus: str
    generators: List[GeneratorDoc]
    lines: List[LineDoc] = Field(default_factory=list)
    horizon: int
    demand: Dict[str, List[float]]


class ScheduleDoc(_Document):
    u: List[List[int]]
    p: List[List[float]]


class HistoryDayDoc(_Document):
    demand: List[float]
    schedule: ScheduleDoc


HISTORY_ADAPTER = TypeAdapter(List[HistoryDayDoc])


class EndpointConfig(BaseModel):
    """Chat-completion endpoint settings; the token only ever comes from the environment."""

    model_config = ConfigDict(extra="forbid")

    url: str
    model: str
    token: Optional[str] = Field(default=None, repr=False)
    timeout: float = Field(default=30.0, gt=0)
    max_retries: int = Field(default=1, ge=0)


class ChatMessage(BaseModel):
    role: str
    content: str


class ChatRequest(BaseModel):
    model: str
    messages: List[ChatMessage]
    temperature: float = 0.0


class ChatChoice(BaseModel):
    index: int = 0
    message: ChatMessage
    finish_reason: str = "stop"


class ChatResponse(BaseModel):
    id: str = "stub-completion"
    object: str = "chat.completion"
    model: str
    choices: List[ChatChoice]
