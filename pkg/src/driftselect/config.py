"""YAML experiment configuration, validated with pydantic before any work."""

from __future__ import annotations

import hashlib
import json
from datetime import date
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .model import HstuHyper
from .protocol import ArmConfig, ProtocolConfig
from .selector import SelectionPlan, Strategy
from .stream import WorldConfig
from .train import TrainConfig

DEFAULT_CONFIG = Path(__file__).with_name("configs") / "default.yaml"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WorldSection(_Strict):
    start: date
    end: date
    num_users: int = Field(200, ge=1)
    initial_catalog: int = Field(1000, ge=1)
    topics: int = Field(8, ge=1)
    drift_rate: float = Field(0.4, ge=0)
    new_items_per_month: int = Field(40, ge=0)
    new_users_per_month: int = Field(4, ge=0)
    events_per_user_per_month: float = Field(10.0, gt=0)
    seed: int = 0
    preference_scale: float = 2.0
    logit_bound: float = Field(4.0, gt=0)
    popularity_sigma: float = Field(1.0, ge=0)
    novelty_boost: float = Field(4.0, ge=0)
    novelty_months: float = Field(3.0, gt=0)

    @model_validator(mode="after")
    def _order(self):
        if self.end <= self.start:
            raise ValueError("world.end must be after world.start")
        return self

    def build(self, seed_offset: int = 0) -> WorldConfig:
        d = self.model_dump(exclude={"start", "end"})
        d["seed"] += seed_offset
        return WorldConfig(**d)


class ModelSection(_Strict):
    d: int = Field(32, ge=1)
    depth: int = Field(2, ge=0)
    max_len: int = Field(100, ge=2)
    tie_item_head: bool = False
    residual: bool = True
    init_std: float = Field(0.02, gt=0)
    action_weight: float = Field(1.0, ge=0)

    def build(self) -> HstuHyper:
        return HstuHyper(**self.model_dump())


class TrainSection(_Strict):
    epochs: int = Field(10, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    negative_samples: int = Field(64, ge=1)
    batch_size: int = Field(32, ge=1)

    def build(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class ArmSection(_Strict):
    name: str
    kind: Literal["none", "full", "random", "select"] = "select"
    repr: Literal["TokenBag", "RepSim", "GradSim"] = "GradSim"
    strategy: Strategy | None = None
    budget_fraction: float = Field(0.2, gt=0, le=1)
    top_fraction: float = Field(0.5, ge=0, le=1)
    clusters: int = Field(10, ge=1)
    batch: int = Field(128, ge=1)
    ref_size: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _needs_strategy(self):
        if self.kind == "select" and self.strategy is None:
            raise ValueError(f"arm {self.name!r}: selection arms need a strategy")
        if self.kind == "select" and self.repr == "TokenBag" and self.strategy in (
                Strategy.KNN_WEIGHTED, Strategy.DIVERSE_WEIGHTED):
            raise ValueError(f"arm {self.name!r}: {self.strategy.value} needs RepSim or GradSim")
        return self

    def build(self) -> ArmConfig:
        plan = None
        if self.strategy is not None:
            plan = SelectionPlan(self.strategy, self.budget_fraction, self.top_fraction, self.clusters, self.batch)
        return ArmConfig(self.name, self.kind, self.repr, plan, self.budget_fraction, self.ref_size)


class ProtocolSection(_Strict):
    pretrain_end: date
    interval_months: int = Field(6, ge=1)
    horizon_intervals: int = Field(3, ge=0)
    ref_size: int = Field(100, ge=1)
    ref_window_months: int = Field(1, ge=1)
    cumulative_replay: bool = True
    remove_ref_from_pool: bool = False


class ExperimentConfig(_Strict):
    world: WorldSection
    model: ModelSection = ModelSection()
    protocol: ProtocolSection
    pretrain: TrainSection = TrainSection()
    train: TrainSection = TrainSection()
    arms: list[ArmSection]
    seeds: list[int] = [0]
    output_dir: str = "runs/default"

    @field_validator("arms")
    @classmethod
    def _unique(cls, arms):
        names = [a.name for a in arms]
        if len(set(names)) != len(names):
            raise ValueError("arm names must be unique")
        return arms

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, seeds):
        if not seeds or len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be a non-empty list of distinct integers")
        return seeds

    def protocol_config(self) -> ProtocolConfig:
        p = self.protocol
        return ProtocolConfig(
            pretrain_end=p.pretrain_end, interval_months=p.interval_months,
            horizon_intervals=p.horizon_intervals, ref_size=p.ref_size,
            ref_window_months=p.ref_window_months, arms=[a.build() for a in self.arms],
            pretrain=self.pretrain.build(), train=self.train.build(),
            cumulative_replay=p.cumulative_replay, remove_ref_from_pool=p.remove_ref_from_pool,
        )

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars.

    List entries are addressed by index, e.g. ``arms.2.batch=32``.
    """
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        last = parts[-1]
        parsed = yaml.safe_load(value)
        if isinstance(node, list):
            node[int(last)] = parsed
        else:
            node[last] = parsed
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path) if path else DEFAULT_CONFIG
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return ExperimentConfig.model_validate(apply_overrides(raw, overrides or []))
