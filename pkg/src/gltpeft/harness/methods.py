"""Transfer-method presets: comparison baselines and ablation arms."""

from __future__ import annotations

from dataclasses import replace

from ..backbone import DEFAULT_ADAPTED, STAGES, Policy
from ..errors import ConfigError

METHODS: dict[str, Policy] = {
    # main comparison
    "glt": Policy(),
    "ft": Policy(adapter=None, full=True),
    "lora": Policy(adapter="matrix-lowrank"),
    "flora": Policy(adapter="additive-tucker"),
    "dense-delta": Policy(adapter="full"),
    # trainable components
    "head-only": Policy(adapter=None, light=False),
    "light-head": Policy(adapter=None),
    "peft-head": Policy(light=False),
    # adaptation depth
    "bottleneck-only": Policy(stages=("bottleneck",)),
    "all-stages": Policy(stages=STAGES),
    # gate mechanism
    "fixed-gate": Policy(gate="fixed"),
    "layer-gate": Policy(gate="layer"),
    # component-wise
    "tucker-lie": Policy(adapter="multiplicative-tucker"),
    # everything frozen
    "none": Policy(adapter=None, light=False, head=False),
}

ALIASES = {
    "head": "head-only",
    "conv1x1-norm-head": "light-head",
    "default": "glt",
    "stage-gate": "glt",
    "additive-tucker": "flora",
    "multiplicative-tucker": "tucker-lie",
}


def resolve(method: str, *, stages=None, ratio=None, gate_init=None, rank=None) -> Policy:
    key = ALIASES.get(method, method)
    if key not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
    policy = METHODS[key]
    overrides = {}
    if stages is not None:
        overrides["stages"] = tuple(stages)
    if ratio is not None:
        overrides["ratio"] = ratio
    if gate_init is not None:
        overrides["gate_init"] = gate_init
    if rank is not None:
        overrides["rank"] = rank
    return replace(policy, **overrides)


__all__ = ["METHODS", "resolve", "DEFAULT_ADAPTED"]
