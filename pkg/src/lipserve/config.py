"""JSON configuration covering every tunable constant of a run."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .kernel import KernelConfig, KvfsConfig
from .model import ModelConfig
from .scheduler import SchedulerConfig
from .workload import WorkloadSpec

DEFAULT_ALPHAS = (0.2, 0.6, 1.0, 1.4, 2.0)
DEFAULT_RATES = {"low": 5.0, "mid": 50.0, "high": 200.0}
DEFAULT_POLICIES = ("topk:20", "none")


@dataclass
class ExperimentConfig:
    kernel: KernelConfig = field(default_factory=KernelConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    alphas: tuple = DEFAULT_ALPHAS
    rates: dict = field(default_factory=lambda: dict(DEFAULT_RATES))
    policies: tuple = DEFAULT_POLICIES

    def to_dict(self) -> dict:
        k = self.kernel
        return {
            "kvfs": dataclasses.asdict(k.kvfs),
            "model": dataclasses.asdict(k.model),
            "scheduler": dataclasses.asdict(k.scheduler),
            "kernel": {"offload_on_io": k.offload_on_io},
            "tools": dict(k.tools),
            "workload": dataclasses.asdict(self.workload),
            "experiment": {"alphas": list(self.alphas), "rates": dict(self.rates), "policies": list(self.policies)},
        }


def _build(cls, block: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(block) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    known = {"kvfs", "model", "scheduler", "kernel", "tools", "workload", "experiment"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config block(s): {', '.join(sorted(unknown))}")
    kernel_block = dict(data.get("kernel", {}))
    offload = kernel_block.pop("offload_on_io", True)
    if kernel_block:
        raise ConfigError(f"unknown key(s) in [kernel]: {', '.join(sorted(kernel_block))}")
    tools = data.get("tools", {})
    for name, spec in tools.items():
        if not isinstance(spec, dict) or "latency" not in spec:
            raise ConfigError(f"tool {name!r} needs a latency")
    kernel = KernelConfig(
        kvfs=_build(KvfsConfig, data.get("kvfs", {}), "kvfs"),
        model=_build(ModelConfig, data.get("model", {}), "model"),
        scheduler=_build(SchedulerConfig, data.get("scheduler", {}), "scheduler"),
        offload_on_io=bool(offload),
        tools=tools,
    )
    exp = dict(data.get("experiment", {}))
    cfg = ExperimentConfig(kernel=kernel, workload=_build(WorkloadSpec, data.get("workload", {}), "workload"))
    if "alphas" in exp:
        cfg.alphas = tuple(float(a) for a in exp.pop("alphas"))
    if "rates" in exp:
        rates = exp.pop("rates")
        cfg.rates = {str(k): float(v) for k, v in rates.items()} if isinstance(rates, dict) else {str(r): float(r) for r in rates}
    if "policies" in exp:
        cfg.policies = tuple(exp.pop("policies"))
    if exp:
        raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(sorted(exp))}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)
