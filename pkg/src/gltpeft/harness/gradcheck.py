"""Finite-difference check of a classifier's trainable set on a small batch."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..adapters import FrozenAdapter, StageGate
from ..backbone import STAGES, Network


def _depends_on(adapter, name: str) -> bool:
    if name in adapter.tensors():
        return True
    gate = getattr(adapter, "gate", None)
    return isinstance(gate, StageGate) and gate.param_name == name


def network_grad_check(net: Network, x, y, eps=1e-5, *, max_coords=64, seed=0, skip_kinks=True, stats=None) -> float:
    """Max relative FD error over every trainable tensor of ``net``.

    Gradients come from one backward pass through the whole network.  For
    the perturbed evaluations of a tensor, stages before its own are replaced
    by their cached output and adapters that do not depend on it by their
    precomputed kernels; both are bit-identical to recomputing them.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ps = net.param_set()
    feats = [net._check_input(x)] + [f.value for f in net.encode(x, ad.Context())]
    kernels = {k: a.effective_weight() for k, a in net.adapters.items()}

    def full():
        return ad.bce_with_logits(net.classify_node(x, ad.Context()), y)

    def value_fn(name):
        stage = name.split(".", 1)[0]
        start = STAGES.index(stage) if stage in STAGES else len(STAGES)
        adapters = {
            k: a if _depends_on(a, name) else FrozenAdapter(k, kernels[k]) for k, a in net.adapters.items()
        }
        f = feats[start]
        return lambda: ad.bce_with_logits(net.classify_node(f, ad.Context(), start, adapters=adapters), y)

    return ad.finite_diff_check(
        full, ps, eps, max_coords=max_coords, seed=seed, skip_kinks=skip_kinks, stats=stats, value_fn=value_fn
    )
