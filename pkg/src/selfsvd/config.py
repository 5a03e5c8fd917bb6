"""Structured config file (YAML) with environment-variable overrides.

Sections: network, mask, flow, train, deploy, smoke. Every field of the
corresponding dataclasses can be set; unknown keys fail fast. Environment
variables named ``SELFSVD_<SECTION>__<FIELD>`` override file values, with the
value parsed as YAML (so ``SELFSVD_TRAIN__ITERS=2000`` or
``SELFSVD_SMOKE__AIRLIGHT="[0.9, 0.9, 0.9]"``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .errors import InvalidConfig
from .flow import BlockMatchingBackend, FlowBackend, load_external_backend
from .losses import LossWeights
from .maskref import MaskGenConfig
from .network import NetworkConfig
from .pipeline import DeployConfig, TrainConfig
from .smoke import SmokeParams

ENV_PREFIX = "SELFSVD_"


@dataclass
class FlowConfig:
    backend: str = "blockmatch"
    search_radius: int = 8
    block_size: int = 8
    external: str = ""

    def __post_init__(self):
        if self.backend not in ("blockmatch", "external"):
            raise InvalidConfig(f"flow.backend must be blockmatch|external, got '{self.backend}'")
        if self.backend == "external" and not self.external:
            raise InvalidConfig("flow.backend=external requires flow.external='module:attr'")


@dataclass
class AppConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    mask: MaskGenConfig = field(default_factory=MaskGenConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    deploy: DeployConfig = field(default_factory=DeployConfig)
    smoke: SmokeParams = field(default_factory=SmokeParams)
    mask_enabled: bool = True

    def make_flow_backend(self) -> FlowBackend:
        if self.flow.backend == "external":
            return load_external_backend(self.flow.external)
        return BlockMatchingBackend(
            search_radius=self.flow.search_radius, block_size=self.flow.block_size
        )

    def mask_cfg_or_none(self) -> Optional[MaskGenConfig]:
        return self.mask if self.mask_enabled else None


_NETWORK_FACTORIES = {
    "full": NetworkConfig,
    "small": NetworkConfig.small,
    "tiny": NetworkConfig.tiny,
}

_TUPLE_FIELDS = {"airlight", "temporal_profile", "drift_velocity"}


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InvalidConfig(f"unknown {section} config keys: {sorted(unknown)}")
    clean = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**clean)
    except TypeError as exc:
        raise InvalidConfig(f"bad {section} config: {exc}") from exc


def _build_network(data: dict) -> NetworkConfig:
    variant = data.get("variant", "full")
    if variant not in _NETWORK_FACTORIES:
        raise InvalidConfig(f"network.variant must be one of {sorted(_NETWORK_FACTORIES)}")
    base = _NETWORK_FACTORIES[variant]()
    overrides = {k: v for k, v in data.items() if k != "variant"}
    known = {f.name for f in fields(NetworkConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise InvalidConfig(f"unknown network config keys: {sorted(unknown)}")
    return replace(base, **overrides)


def _build_train(data: dict) -> TrainConfig:
    data = dict(data)
    if "weights" in data:
        raise InvalidConfig("set train.lambda_reg / train.lambda_gan, not train.weights")
    weights = LossWeights(
        lambda_reg=data.pop("lambda_reg", LossWeights().lambda_reg),
        lambda_gan=data.pop("lambda_gan", LossWeights().lambda_gan),
    )
    cfg = _build_section(TrainConfig, data, "train")
    return replace(cfg, weights=weights)


def _apply_env(sections: dict, env) -> dict:
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX) :].lower()
        if "__" not in path:
            sections[path] = yaml.safe_load(raw)
            continue
        section, field_name = path.split("__", 1)
        sections.setdefault(section, {})
        if not isinstance(sections[section], dict):
            raise InvalidConfig(f"cannot override scalar section '{section}'")
        sections[section][field_name] = yaml.safe_load(raw)
    return sections


def load_config(path=None, env=None) -> AppConfig:
    """Load an AppConfig from an optional YAML file plus env overrides."""
    sections: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise InvalidConfig(f"{path}: top level must be a mapping")
        sections.update(loaded)
    sections = _apply_env(sections, os.environ if env is None else env)

    known_sections = {"network", "mask", "flow", "train", "deploy", "smoke", "mask_enabled"}
    unknown = set(sections) - known_sections
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")

    return AppConfig(
        network=_build_network(sections.get("network", {})),
        mask=_build_section(MaskGenConfig, sections.get("mask", {}), "mask"),
        flow=_build_section(FlowConfig, sections.get("flow", {}), "flow"),
        train=_build_train(sections.get("train", {})),
        deploy=_build_section(DeployConfig, sections.get("deploy", {}), "deploy"),
        smoke=_build_section(SmokeParams, sections.get("smoke", {}), "smoke"),
        mask_enabled=bool(sections.get("mask_enabled", True)),
    )
