"""Miniature 3D residual U-Net encoder with segmentation and classification heads.

Stages are ``stem, down1, down2, down3, down4, bottleneck``; every stage but
the stem halves the resolution with a stride-2 first convolution, so a 32^3
input reaches the bottleneck at 1^3.

Every parameter carries one freeze tag:

``frozen``           fixed
``glt-adapted``      a 3x3x3 kernel wrapped by an adapter (the kernel itself
                     stays fixed) or one of the adapter's own tensors
``light-trainable``  1x1x1 shortcuts and normalisation affines of adapted stages
``head``             classification or segmentation head
``full``             trained directly (full fine-tuning, pretraining)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import (
    Adapter,
    DenseAdapter,
    FrozenAdapter,
    LowRankAdapter,
    StageGate,
    TuckerAdapter,
    baseline_adapter,
)
from .errors import ConfigError, ShapeError

STAGES = ("stem", "down1", "down2", "down3", "down4", "bottleneck")
DEFAULT_ADAPTED = ("down2", "down3", "down4", "bottleneck")
TOY_PLAN = (8, 16, 32, 64, 64, 128)
TAGS = ("frozen", "glt-adapted", "light-trainable", "head", "full")
DOWNSAMPLE = 2 ** (len(STAGES) - 1)


def norm_groups(channels: int) -> int:
    return channels // 8 if channels % 8 == 0 else 1


def _he(rng, shape):
    fan_in = math.prod(shape[1:])
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class ResidualDoubleConv:
    """``relu(norm(conv_b(relu(norm(conv_a(x)))))) + shortcut(x)``."""

    def __init__(self, prefix: str, c_in: int, c_out: int, stride: int, rng):
        self.prefix = prefix
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.params: dict[str, np.ndarray] = {}
        self.params[f"{prefix}.conv_a.weight"] = _he(rng, (c_out, c_in, 3, 3, 3))
        self.params[f"{prefix}.norm_a.scale"] = np.ones(c_out)
        self.params[f"{prefix}.norm_a.shift"] = np.zeros(c_out)
        self.params[f"{prefix}.conv_b.weight"] = _he(rng, (c_out, c_out, 3, 3, 3))
        self.params[f"{prefix}.norm_b.scale"] = np.ones(c_out)
        self.params[f"{prefix}.norm_b.shift"] = np.zeros(c_out)
        if c_in != c_out or stride != 1:
            self.params[f"{prefix}.shortcut.weight"] = _he(rng, (c_out, c_in, 1, 1, 1))

    @property
    def kernel_names(self) -> tuple[str, str]:
        return f"{self.prefix}.conv_a", f"{self.prefix}.conv_b"

    @property
    def light_names(self) -> list[str]:
        return [n for n in self.params if ".norm_" in n or ".shortcut." in n]

    def forward(self, x: ad.Node, ctx: ad.Context, adapters: dict[str, Adapter]) -> ad.Node:
        p = self.prefix
        groups = norm_groups(self.c_out)

        def kernel(layer):
            adapter = adapters.get(f"{p}.{layer}")
            if adapter is not None:
                return adapter.effective_weight_node(ctx)
            return ctx.param(f"{p}.{layer}.weight", self.params[f"{p}.{layer}.weight"])

        def norm(h, which):
            scale = ctx.param(f"{p}.norm_{which}.scale", self.params[f"{p}.norm_{which}.scale"])
            shift = ctx.param(f"{p}.norm_{which}.shift", self.params[f"{p}.norm_{which}.shift"])
            return ad.group_norm(h, scale, shift, groups)

        h = ad.relu(norm(ad.conv3d(x, kernel("conv_a"), self.stride, 1), "a"))
        h = ad.relu(norm(ad.conv3d(h, kernel("conv_b"), 1, 1), "b"))
        name = f"{p}.shortcut.weight"
        if name in self.params:
            skip = ad.conv3d(x, ctx.param(name, self.params[name]), self.stride, 0)
        else:
            skip = x
        return ad.add(h, skip)


@dataclass
class Network:
    plan: tuple[int, ...]
    in_channels: int
    head_kind: str
    blocks: dict[str, ResidualDoubleConv]
    decoder: dict[str, ResidualDoubleConv] = field(default_factory=dict)
    head: dict[str, np.ndarray] = field(default_factory=dict)
    adapters: dict[str, Adapter] = field(default_factory=dict)
    gates: dict[str, StageGate] = field(default_factory=dict)
    tags: dict[str, str] = field(default_factory=dict)

    # --- parameter bookkeeping -------------------------------------------

    def encoder_params(self) -> dict[str, np.ndarray]:
        out = {}
        for stage in STAGES:
            out.update(self.blocks[stage].params)
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        """Every parameter array by name, in a fixed order."""
        out = self.encoder_params()
        for adapter in self.adapters.values():
            out.update(adapter.tensors())
        for gate in self.gates.values():
            out[gate.param_name] = gate.raw
        for adapter in self.adapters.values():
            if isinstance(adapter, TuckerAdapter) and not isinstance(adapter.gate, StageGate):
                out[f"{adapter.name}.gate.value"] = np.asarray(adapter.gate_value)
        for block in self.decoder.values():
            out.update(block.params)
        out.update(self.head)
        return out

    def adapted_base_names(self) -> set[str]:
        return {f"{name}.weight" for name in self.adapters}

    def trainable_names(self) -> list[str]:
        base = self.adapted_base_names()
        out = []
        for name in self.parameters():
            tag = self.tags[name]
            if tag == "frozen" or name in base or name.endswith(".gate.value"):
                continue
            out.append(name)
        return out

    def param_set(self) -> ad.ParamSet:
        ps = ad.ParamSet()
        trainable = set(self.trainable_names())
        for name, value in self.parameters().items():
            ps.add(name, value, name in trainable)
        return ps

    def check_partition(self) -> None:
        names = set(self.parameters())
        if set(self.tags) != names:
            raise ConfigError(f"freeze tags do not cover parameters: {sorted(names ^ set(self.tags))[:5]}")
        bad = {t for t in self.tags.values() if t not in TAGS}
        if bad:
            raise ConfigError(f"unknown freeze tags {sorted(bad)}")

    def count_by_tag(self) -> dict[str, int]:
        counts = {t: 0 for t in TAGS}
        for name, value in self.parameters().items():
            counts[self.tags[name]] += value.size
        return counts

    def trainable_count(self) -> int:
        params = self.parameters()
        return sum(params[n].size for n in self.trainable_names())

    def full_finetune_count(self) -> int:
        """Parameters trained by full fine-tuning: encoder plus head."""
        return sum(v.size for v in self.encoder_params().values()) + sum(v.size for v in self.head.values())

    def effective_kernel(self, layer: str) -> np.ndarray:
        adapter = self.adapters.get(layer)
        if adapter is not None:
            return adapter.effective_weight()
        return self.encoder_params()[f"{layer}.weight"]

    def stage_of(self, layer: str) -> str:
        return layer.split(".", 1)[0]

    # --- forward ----------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x[None]
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected input [N, {self.in_channels}, S, S, S], got {x.shape}")
        if any(s % DOWNSAMPLE for s in x.shape[2:]):
            raise ConfigError(f"spatial size {x.shape[2:]} must be divisible by {DOWNSAMPLE}")
        return x

    def encode(self, x, ctx: ad.Context, start: int = 0, stop: int = len(STAGES), adapters=None) -> list[ad.Node]:
        """Run stages ``start..stop-1``; ``x`` is the input of stage ``start``.

        ``adapters`` overrides ``self.adapters`` for this pass only.
        """
        adapters = self.adapters if adapters is None else adapters
        h = x if isinstance(x, ad.Node) else ad.constant(x)
        feats = [h] if start == stop else []
        for stage in STAGES[start:stop]:
            h = self.blocks[stage].forward(h, ctx, adapters)
            feats.append(h)
        return feats

    def classify_node(self, x, ctx: ad.Context, start: int = 0, adapters=None) -> ad.Node:
        if self.head_kind != "classification":
            raise ConfigError("network has no classification head")
        if start == 0:
            x = self._check_input(x)
        h = self.encode(x, ctx, start, adapters=adapters)[-1]
        pooled = ad.global_avg_pool(h)
        w = ctx.param("head.weight", self.head["head.weight"])
        b = ctx.param("head.bias", self.head["head.bias"])
        return ad.reshape(ad.dense(pooled, w, b), (pooled.shape[0],))

    def segment_node(self, x, ctx: ad.Context) -> ad.Node:
        if self.head_kind != "segmentation":
            raise ConfigError("network has no segmentation decoder")
        x = self._check_input(x)
        feats = self.encode(x, ctx)
        h = feats[-1]
        for level in range(len(STAGES) - 2, -1, -1):
            h = ad.concat([ad.upsample2(h), feats[level]], axis=1)
            h = self.decoder[f"up{level}"].forward(h, ctx, {})
        w = ctx.param("seg_head.weight", self.head["seg_head.weight"])
        b = ctx.param("seg_head.bias", self.head["seg_head.bias"])
        out = ad.conv3d(h, w, 1, 0)
        return ad.add(out, ad.reshape(b, (1, 1, 1, 1, 1)))

    def forward_classify(self, x) -> np.ndarray:
        return self.classify_node(x, ad.Context()).value

    def forward_segment(self, x) -> np.ndarray:
        return self.segment_node(x, ad.Context()).value

    def features(self, x, stop: int) -> np.ndarray:
        """Output of stage ``stop - 1`` (the input itself when ``stop == 0``)."""
        x = self._check_input(x)
        if stop == 0:
            return x
        return self.encode(x, ad.Context(), 0, stop)[-1].value


def _classification_head(rng, channels):
    return {
        "head.weight": rng.standard_normal((1, channels)) / math.sqrt(channels),
        "head.bias": np.zeros(1),
    }


def build_network(plan=TOY_PLAN, head_kind="classification", seed=1000, in_channels=1) -> Network:
    plan = tuple(int(c) for c in plan)
    if len(plan) != len(STAGES) or min(plan) < 1:
        raise ConfigError(f"channel plan needs {len(STAGES)} positive entries, got {plan}")
    if head_kind not in ("segmentation", "classification"):
        raise ConfigError(f"unknown head kind {head_kind!r}")
    rng = np.random.default_rng(seed)
    blocks = {}
    c_prev = in_channels
    for i, (stage, c) in enumerate(zip(STAGES, plan)):
        blocks[stage] = ResidualDoubleConv(stage, c_prev, c, 1 if i == 0 else 2, rng)
        c_prev = c
    decoder, head = {}, {}
    if head_kind == "segmentation":
        c_up = plan[-1]
        for level in range(len(STAGES) - 2, -1, -1):
            decoder[f"up{level}"] = ResidualDoubleConv(f"up{level}", c_up + plan[level], plan[level], 1, rng)
            c_up = plan[level]
        # small head so the initial mask logits sit near zero rather than saturated
        head = {"seg_head.weight": 0.01 * _he(rng, (1, plan[0], 1, 1, 1)), "seg_head.bias": np.zeros(1)}
    else:
        head = _classification_head(rng, plan[-1])
    net = Network(plan, in_channels, head_kind, blocks, decoder, head)
    net.tags = {name: "full" for name in net.parameters()}
    net.tags.update({name: "head" for name in net.head})
    return net


def to_classifier(net: Network, seed: int) -> Network:
    """Copy the encoder of ``net`` and attach a fresh classification head.

    The segmentation decoder is dropped.  Every encoder parameter starts frozen.
    """
    rng = np.random.default_rng(seed)
    blocks = {}
    for stage, block in net.blocks.items():
        clone = ResidualDoubleConv.__new__(ResidualDoubleConv)
        clone.prefix, clone.c_in, clone.c_out, clone.stride = block.prefix, block.c_in, block.c_out, block.stride
        clone.params = {k: v.copy() for k, v in block.params.items()}
        blocks[stage] = clone
    out = Network(net.plan, net.in_channels, "classification", blocks, head=_classification_head(rng, net.plan[-1]))
    out.tags = {name: "frozen" for name in out.parameters()}
    out.tags.update({name: "head" for name in out.head})
    return out


def _check_stages(stages) -> tuple[str, ...]:
    stages = tuple(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage name(s) {unknown}; expected a subset of {STAGES}")
    return tuple(s for s in STAGES if s in stages)


@dataclass
class Policy:
    """Which parameters a transfer method trains.

    ``adapter`` names the kernel reparameterisation applied to the 3x3x3
    convolutions of ``stages`` (``None`` leaves them plain).  ``gate`` is
    ``"stage"`` (one learnable gate per stage), ``"layer"`` (one per kernel)
    or ``"fixed"`` (stage gate with gradient disabled).
    """

    stages: tuple[str, ...] = DEFAULT_ADAPTED
    adapter: str | None = "glt"
    light: bool = True
    head: bool = True
    gate: str = "stage"
    full: bool = False
    ratio: float = 0.0625
    gate_init: float = 0.6
    rank: int = 4


def configure(net: Network, policy: Policy, seed: int = 1000) -> Network:
    """Attach adapters and recompute the freeze partition in place."""
    stages = _check_stages(policy.stages)
    if policy.gate not in ("stage", "layer", "fixed"):
        raise ConfigError(f"unknown gate mode {policy.gate!r}")
    net.adapters.clear()
    net.gates.clear()
    rng = np.random.default_rng(seed)
    enc = net.encoder_params()
    if policy.adapter is not None and not policy.full:
        for stage in stages:
            block = net.blocks[stage]
            stage_gate = None
            if policy.adapter == "glt" and policy.gate != "layer":
                stage_gate = StageGate(stage, policy.gate_init, trainable=policy.gate == "stage")
                net.gates[stage] = stage_gate
            for layer in block.kernel_names:
                gate = stage_gate
                if policy.adapter == "glt" and policy.gate == "layer":
                    gate = net.gates[layer] = StageGate(layer, policy.gate_init)
                net.adapters[layer] = baseline_adapter(
                    policy.adapter,
                    layer,
                    enc[f"{layer}.weight"],
                    int(rng.integers(2**31)),
                    ratio=policy.ratio,
                    rank=policy.rank,
                    gate=gate,
                )
    tags = {}
    for name in net.parameters():
        tags[name] = "frozen"
    for stage in STAGES:
        block = net.blocks[stage]
        if policy.full:
            for name in block.params:
                tags[name] = "full"
            continue
        if stage not in stages:
            continue
        if policy.light:
            for name in block.light_names:
                tags[name] = "light-trainable"
        for layer in block.kernel_names:
            adapter = net.adapters.get(layer)
            if adapter is None or isinstance(adapter, FrozenAdapter):
                continue
            tags[f"{layer}.weight"] = "glt-adapted"
            for name in adapter.tensors():
                tags[name] = "glt-adapted"
    for gate in net.gates.values():
        tags[gate.param_name] = "glt-adapted" if gate.trainable else "frozen"
    for name in net.head:
        tags[name] = "head" if policy.head else "frozen"
    net.tags = tags
    net.check_partition()
    return net


def apply_glt(net: Network, stages=DEFAULT_ADAPTED, ratio=0.0625, gate_init=0.6, seed=1000) -> Network:
    return configure(net, Policy(stages=tuple(stages), ratio=ratio, gate_init=gate_init), seed)


# --- state (de)serialisation ------------------------------------------------


def state(net: Network) -> list[tuple[str, str, np.ndarray]]:
    return [(name, net.tags[name], value) for name, value in net.parameters().items()]


def from_state(records) -> Network:
    """Rebuild a network, its adapters and tags from ``(name, tag, array)`` records."""
    values = {name: np.array(arr, dtype=np.float64) for name, _, arr in records}
    tags = {name: tag for name, tag, _ in records}
    try:
        plan = tuple(values[f"{s}.conv_a.weight"].shape[0] for s in STAGES)
        in_channels = values["stem.conv_a.weight"].shape[1]
    except KeyError as exc:
        raise ConfigError(f"checkpoint lacks encoder kernel {exc.args[0]}") from None
    head_kind = "classification" if "head.weight" in values else "segmentation"
    net = build_network(plan, head_kind, seed=0, in_channels=in_channels)
    expected = net.encoder_params() | net.head
    for block in net.decoder.values():
        expected |= block.params
    mismatches = [
        f"{n}: {values[n].shape} vs {v.shape}" if n in values else f"{n}: missing"
        for n, v in expected.items()
        if n not in values or values[n].shape != v.shape
    ]
    if mismatches:
        raise ConfigError("checkpoint incompatible with architecture: " + "; ".join(mismatches))
    for name, arr in expected.items():
        arr[...] = values[name]

    enc = net.encoder_params()
    for stage in STAGES:
        raw = values.get(f"{stage}.gate.raw")
        if raw is not None:
            gate = StageGate(stage, trainable=tags[f"{stage}.gate.raw"] != "frozen")
            gate.raw[...] = raw
            net.gates[stage] = gate
        for layer in net.blocks[stage].kernel_names:
            base = enc[f"{layer}.weight"]
            if f"{layer}.tucker.core" in values:
                if f"{layer}.gate.raw" in values:
                    gate = StageGate(layer, trainable=tags[f"{layer}.gate.raw"] != "frozen")
                    gate.raw[...] = values[f"{layer}.gate.raw"]
                    net.gates[layer] = gate
                elif f"{layer}.gate.value" in values:
                    gate = float(values[f"{layer}.gate.value"])
                elif stage in net.gates:
                    gate = net.gates[stage]
                else:
                    raise ConfigError(f"no gate record for adapted layer {layer}")
                net.adapters[layer] = TuckerAdapter(
                    layer,
                    base,
                    values[f"{layer}.tucker.core"],
                    values[f"{layer}.tucker.u_out"],
                    values[f"{layer}.tucker.u_in"],
                    gate,
                )
            elif f"{layer}.lora.a" in values:
                net.adapters[layer] = LowRankAdapter(layer, base, values[f"{layer}.lora.a"], values[f"{layer}.lora.b"])
            elif f"{layer}.delta" in values:
                net.adapters[layer] = DenseAdapter(layer, base, values[f"{layer}.delta"])
    names = set(net.parameters())
    extra = set(values) - names
    if extra:
        raise ConfigError(f"checkpoint has unrecognised records {sorted(extra)[:5]}")
    net.tags = {name: tags[name] for name in net.parameters()}
    net.check_partition()
    return net
