"""
Pydantic models for run configuration and CSV records
"""

from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from okgrad.approximators import parse_algo
from okgrad.errors import ShapeError

# learning rates searched per algorithm; --lr-index picks one
LR_GRID = (10 ** -2.5, 1e-3, 10 ** -3.5, 1e-4)


def _valid_algo(value):
    try:
        return str(parse_algo(value))
    except ShapeError as e:
        raise ValueError(str(e)) from e


class RunConfig(BaseModel):
    """Configuration of one training run"""
    task: Literal["copy", "lm"]
    algo: str = "ok:4"
    units: int = Field(64, ge=1)
    batch: int = Field(16, ge=1)
    lr: float = Field(1e-3, ge=0.0)
    lr_index: Optional[int] = Field(None, ge=0, lt=len(LR_GRID))
    steps: int = Field(1000, ge=0)
    seed: int = 0
    data: Optional[str] = None
    valid: Optional[str] = None
    out: str = "run.csv"
    checkpoint: Optional[str] = None
    eval_every: int = Field(100, ge=1)
    reset_prob: float = Field(0.01, ge=0.0, le=1.0)
    t_max_start: int = Field(1, ge=1)
    no_wallclock: bool = False

    @field_validator("algo")
    @classmethod
    def _check_algo(cls, v):
        return _valid_algo(v)

    @model_validator(mode="after")
    def _check_run(self):
        if self.task == "lm" and not self.data:
            raise ValueError("task 'lm' requires a training corpus (--data)")
        if self.task == "copy" and self.valid:
            raise ValueError("--valid only applies to task 'lm'")
        if self.lr_index is not None:
            self.lr = LR_GRID[self.lr_index]
        return self


class NoiseConfig(BaseModel):
    """Configuration of the frozen-network gradient-noise measurement"""
    checkpoint: str
    algo: str = "ok:2"
    steps: int = Field(1000, ge=0)
    repetitions: int = Field(20, ge=0)
    seed: int = 0
    out: str = "noise"
    data: Optional[str] = None
    filter_threshold: float = Field(1e-4, ge=0.0)

    @field_validator("algo")
    @classmethod
    def _check_algo(cls, v):
        return _valid_algo(v)


class RunRecord(BaseModel):
    step: int
    split: Literal["train", "valid"] = "train"
    loss_bpc: float
    t_max: Optional[int] = None
    wallclock_s: float = 0.0
    updates_done: int = 0


class CosineRecord(BaseModel):
    step: int
    cosine: Optional[float] = None
    true_norm: float
    approx_norm: float
    filtered: bool = False

    @field_validator("cosine")
    @classmethod
    def _bounded(cls, v):
        if v is not None and abs(v) > 1.0 + 1e-12:
            raise ValueError(f"cosine {v} outside [-1, 1]")
        return v


class BenchRecord(BaseModel):
    algo: str
    rank: int
    n: int
    state_bytes: int
    step_seconds: float
