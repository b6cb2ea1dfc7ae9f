"""Weight adapters for 3D convolution kernels.

The central one is :class:`GLTAdapter`: a channel-mode Tucker delta

    dW = G x_0 U_out x_1 U_in        (G: [r_out, r_in, k, k, k])

combined with the frozen kernel through a gate g in (0, 1):

    W' = W0 + (1 - g) dW + g (W0 * dW)

which interpolates between the additive update ``W0 + dW`` (g = 0) and the
first-order expansion of the multiplicative update ``W0 * exp(dW)`` (g = 1).
The core starts at zero so every adapter begins as an exact no-op.

All adapters expose ``effective_weight_node(ctx)`` for training and a numpy
``effective_weight()`` built from the same graph code.
"""

from __future__ import annotations

import math
import numpy as np

from . import autodiff as ad
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ConfigError(f"gate value must lie strictly in (0, 1), got {p}")
    return math.log(p) - math.log1p(-p)


def rank_from_ratio(channels: int, ratio: float) -> int:
    if channels < 1:
        raise ConfigError(f"channels must be >= 1, got {channels}")
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"rank ratio must lie in (0, 1], got {ratio}")
    return min(channels, max(1, math.floor(channels * ratio + 0.5)))


class StageGate:
    """Learnable scalar shared by the adapters of one stage; value = logistic(raw)."""

    def __init__(self, name: str, init: float = 0.5, trainable: bool = True):
        self.name = name
        self.raw = np.asarray(logit(init), dtype=np.float64)
        self.trainable = trainable

    @property
    def param_name(self) -> str:
        return f"{self.name}.gate.raw"

    @property
    def value(self) -> float:
        return float(ad.logistic(self.raw))

    def node(self, ctx: ad.Context) -> ad.Node:
        return ad.sigmoid(ctx.param(self.param_name, self.raw))

    def __repr__(self):
        return f"StageGate({self.name!r}, g={self.value:.6g}, trainable={self.trainable})"


class Adapter:
    """Base class: a frozen kernel plus a (possibly empty) trainable reparameterisation."""

    kind = "none"

    def __init__(self, name: str, base: np.ndarray):
        if base.ndim != 5:
            raise ShapeError(f"adapter base must be a 5-mode kernel, got shape {base.shape}")
        self.name = name
        self.base = base

    @property
    def c_out(self) -> int:
        return self.base.shape[0]

    @property
    def c_in(self) -> int:
        return self.base.shape[1]

    @property
    def k(self) -> int:
        return self.base.shape[2]

    def tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors keyed by full parameter name (gate excluded)."""
        return {}

    def delta_node(self, ctx: ad.Context) -> ad.Node | None:
        return None

    def effective_weight_node(self, ctx: ad.Context) -> ad.Node:
        w0 = ctx.param(f"{self.name}.weight", self.base)
        delta = self.delta_node(ctx)
        return w0 if delta is None else ad.add(w0, delta)

    def effective_weight(self) -> np.ndarray:
        return self.effective_weight_node(ad.Context()).value

    def delta_weight(self) -> np.ndarray:
        d = self.delta_node(ad.Context())
        return np.zeros_like(self.base) if d is None else d.value

    def trainable_param_count(self) -> int:
        return sum(t.size for t in self.tensors().values())


class TuckerAdapter(Adapter):
    """Channel-mode Tucker delta with the gated additive/multiplicative rule.

    ``gate`` is either a :class:`StageGate` (learnable or fixed) or a plain
    float pinning g exactly, as the additive (0.0) and multiplicative (1.0)
    baselines do.
    """

    kind = "tucker"

    def __init__(self, name, base, core, u_out, u_in, gate):
        super().__init__(name, base)
        r_out, r_in = core.shape[:2]
        if core.shape[2:] != base.shape[2:]:
            raise ShapeError(f"core spatial modes {core.shape[2:]} differ from kernel {base.shape[2:]}")
        if u_out.shape != (self.c_out, r_out) or u_in.shape != (self.c_in, r_in):
            raise ShapeError(
                f"factor shapes {u_out.shape}, {u_in.shape} inconsistent with "
                f"kernel {base.shape} and core {core.shape}"
            )
        if not (1 <= r_out <= self.c_out and 1 <= r_in <= self.c_in):
            raise ShapeError(f"ranks ({r_out}, {r_in}) out of range for channels ({self.c_out}, {self.c_in})")
        self.core = core
        self.u_out = u_out
        self.u_in = u_in
        self.gate = gate

    @property
    def ranks(self) -> tuple[int, int]:
        return self.core.shape[0], self.core.shape[1]

    @property
    def gate_value(self) -> float:
        return self.gate.value if isinstance(self.gate, StageGate) else float(self.gate)

    def tensors(self):
        return {
            f"{self.name}.tucker.core": self.core,
            f"{self.name}.tucker.u_out": self.u_out,
            f"{self.name}.tucker.u_in": self.u_in,
        }

    def delta_node(self, ctx):
        core = ctx.param(f"{self.name}.tucker.core", self.core)
        u_out = ctx.param(f"{self.name}.tucker.u_out", self.u_out)
        u_in = ctx.param(f"{self.name}.tucker.u_in", self.u_in)
        return ad.mode_product(ad.mode_product(core, u_out, 0), u_in, 1)

    def effective_weight_node(self, ctx):
        # W0 + (1-g) dW + g (W0 * dW) == W0 + dW * ((1-g) + g W0), in fewer
        # full-size passes; both gate limits stay exact (mix == 1 or W0).
        w0 = ctx.param(f"{self.name}.weight", self.base)
        delta = self.delta_node(ctx)
        if isinstance(self.gate, StageGate):
            g = self.gate.node(ctx)
            mix = ad.add(ad.mul(g, w0), ad.rsub_scalar(1.0, g))
        else:
            g = float(self.gate)
            mix = ad.constant(g * self.base + (1.0 - g))
        return ad.add(w0, ad.hadamard(delta, mix))

    def effective_weight_exact(self) -> np.ndarray:
        """Gated rule with the exact exponential; for verification only."""
        delta = self.delta_weight()
        g = self.gate_value
        return (1.0 - g) * (self.base + delta) + g * T.hadamard(self.base, T.elem_exp(delta))


GLTAdapter = TuckerAdapter


class LowRankAdapter(Adapter):
    """LoRA-style delta ``B @ A`` on the ``[C_out, C_in * k^3]`` flattening."""

    kind = "lora"

    def __init__(self, name, base, a, b):
        super().__init__(name, base)
        fan_in = self.c_in * self.k**3
        if a.shape[1] != fan_in or b.shape[0] != self.c_out or a.shape[0] != b.shape[1]:
            raise ShapeError(f"low-rank factors {b.shape} @ {a.shape} do not match kernel {base.shape}")
        self.a = a
        self.b = b

    def tensors(self):
        return {f"{self.name}.lora.a": self.a, f"{self.name}.lora.b": self.b}

    def delta_node(self, ctx):
        a = ctx.param(f"{self.name}.lora.a", self.a)
        b = ctx.param(f"{self.name}.lora.b", self.b)
        return ad.reshape(ad.matmul(b, a), self.base.shape)


class DenseAdapter(Adapter):
    """Fully trainable dense delta."""

    kind = "full"

    def __init__(self, name, base, delta):
        super().__init__(name, base)
        if delta.shape != base.shape:
            raise ShapeError(f"dense delta shape {delta.shape} differs from kernel {base.shape}")
        self.delta = delta

    def tensors(self):
        return {f"{self.name}.delta": self.delta}

    def delta_node(self, ctx):
        return ctx.param(f"{self.name}.delta", self.delta)


class FrozenAdapter(Adapter):
    kind = "none"


def _uniform(rng, rows, cols, fan):
    bound = 1.0 / math.sqrt(fan)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_adapter(name, c_out, c_in, k, ratio, gate, base, seed) -> TuckerAdapter:
    """Zero-core Tucker adapter with seeded uniform factors."""
    if base.shape != (c_out, c_in, k, k, k):
        raise ShapeError(f"base shape {base.shape} does not match ({c_out}, {c_in}, {k}, {k}, {k})")
    rng = np.random.default_rng(seed)
    r_out = rank_from_ratio(c_out, ratio)
    r_in = rank_from_ratio(c_in, ratio)
    u_out = _uniform(rng, c_out, r_out, c_out)
    u_in = _uniform(rng, c_in, r_in, c_in)
    core = np.zeros((r_out, r_in, k, k, k))
    return TuckerAdapter(name, base, core, u_out, u_in, gate)


ADAPTER_KINDS = ("glt", "additive-tucker", "multiplicative-tucker", "matrix-lowrank", "full", "none")


def baseline_adapter(kind: str, name: str, base: np.ndarray, seed: int, *, ratio=0.0625, rank=4, gate=None):
    """Build an adapter of the given kind around ``base``."""
    c_out, c_in, k = base.shape[0], base.shape[1], base.shape[2]
    if kind == "glt":
        if gate is None:
            raise ConfigError("glt adapter needs a gate")
        return init_adapter(name, c_out, c_in, k, ratio, gate, base, seed)
    if kind == "additive-tucker":
        return init_adapter(name, c_out, c_in, k, ratio, 0.0, base, seed)
    if kind == "multiplicative-tucker":
        return init_adapter(name, c_out, c_in, k, ratio, 1.0, base, seed)
    if kind == "matrix-lowrank":
        fan_in = c_in * k**3
        if not 1 <= rank <= min(c_out, fan_in):
            raise ConfigError(f"low-rank rank {rank} out of range for kernel {base.shape}")
        rng = np.random.default_rng(seed)
        a = _uniform(rng, rank, fan_in, fan_in)
        return LowRankAdapter(name, base, a, np.zeros((c_out, rank)))
    if kind == "full":
        return DenseAdapter(name, base, np.zeros_like(base))
    if kind == "none":
        return FrozenAdapter(name, base)
    raise ConfigError(f"unknown adapter kind {kind!r}; expected one of {ADAPTER_KINDS}")


def relative_update_magnitude(adapter: Adapter) -> float:
    """``||W' - W0||_F / ||W0||_F``."""
    return relative_change(adapter.effective_weight(), adapter.base)


def relative_change(weight: np.ndarray, base: np.ndarray) -> float:
    base_norm = T.frobenius_norm(base)
    if base_norm == 0.0:
        raise ContractError("relative update magnitude undefined for a zero-norm base kernel")
    return T.frobenius_norm(weight - base) / base_norm
