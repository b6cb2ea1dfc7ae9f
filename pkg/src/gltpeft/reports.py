"""Plain-text and JSON reports: adaptation metrics, sweep tables, update diagnostics."""

from __future__ import annotations

import json
import math

import numpy as np

from .adapters import relative_change
from .backbone import Network
from .errors import ConfigError
from .harness.training import SELECTED_STAGES, MetricsReport, SweepResult, gate_values


def _num(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _kv(pairs, width=None) -> list[str]:
    pairs = list(pairs)
    width = width or max((len(k) for k, _ in pairs), default=0)
    return [f"{k.ljust(width)} = {_num(v)}" for k, v in pairs]


def to_json(obj) -> str:
    """Deterministic JSON; ``None`` stays ``null`` and non-finite floats are rejected."""

    def fix(x):
        if isinstance(x, dict):
            return {str(k): fix(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [fix(v) for v in x]
        if isinstance(x, np.generic):
            return x.item()
        return x

    return json.dumps(fix(obj), indent=2, sort_keys=False, allow_nan=False) + "\n"


# --- adapt -----------------------------------------------------------------


def metrics_text(report: MetricsReport) -> str:
    lines = ["[run]"]
    lines += _kv(
        [
            ("method", report.method),
            ("best_epoch", report.best_epoch),
            ("val_auc", report.val_auc),
        ]
    )
    for split in ("test", "val"):
        m = getattr(report, split)
        lines += ["", f"[{split}]"]
        lines += _kv(m.as_dict().items())
    lines += ["", "[parameters]"]
    lines += _kv(
        [
            ("trainable", report.trainable_params),
            ("full_finetune", report.ft_params),
            ("trainable_fraction", report.trainable_fraction),
        ]
        + [(f"trainable.{k}", v) for k, v in report.breakdown.items()]
        + [(f"tag.{k}", v) for k, v in report.counts_by_tag.items()]
    )
    lines += ["", "[gates]"]
    lines += _kv(report.gates.items()) if report.gates else ["(none)"]
    lines += ["", "[update_magnitude]"]
    lines += _kv(list(report.update_magnitudes.items()) + [("mean", report.mean_update_magnitude)])
    return "\n".join(lines) + "\n"


# --- sweep -----------------------------------------------------------------


def sweep_table(result: SweepResult) -> str:
    """Ratio rows by gate columns; the argmax cell is starred."""
    head = "ratio \\ gate"
    cells = {}
    for cell, auc in result.val_auc.items():
        text = "n/a" if auc is None else f"{auc:.4f}"
        cells[cell] = text + ("*" if cell == result.best else " ")
    width = max(7, *(len(v) for v in cells.values()))
    row_w = max(len(head), *(len(repr(r)) for r in result.ratios))
    lines = [head.ljust(row_w) + " | " + " ".join(repr(g).rjust(width) for g in result.gates)]
    lines.append("-" * len(lines[0]))
    for r in result.ratios:
        lines.append(repr(r).ljust(row_w) + " | " + " ".join(cells[(r, g)].rjust(width) for g in result.gates))
    r, g = result.best
    lines += ["", f"best: ratio = {r!r}, gate = {g!r}, val_auc = {_num(result.best_auc)}"]
    return "\n".join(lines) + "\n"


def sweep_dict(result: SweepResult) -> dict:
    return {
        "ratios": result.ratios,
        "gates": result.gates,
        "cells": [{"ratio": r, "gate": g, "val_auc": auc} for (r, g), auc in result.val_auc.items()],
        "best": {"ratio": result.best[0], "gate": result.best[1], "val_auc": result.best_auc},
    }


# --- diagnose --------------------------------------------------------------


def diagnose(model: Network, base: Network) -> dict:
    """Relative update magnitudes of the selected 3x3x3 kernels of ``model`` against ``base``."""
    base_params = base.encoder_params()
    mismatches, layers = [], {}
    for stage in SELECTED_STAGES:
        if stage not in model.blocks or stage not in base.blocks:
            mismatches.append(f"{stage}: missing")
            continue
        for layer in model.blocks[stage].kernel_names:
            w = model.effective_kernel(layer)
            w0 = base_params.get(f"{layer}.weight")
            if w0 is None or w0.shape != w.shape:
                got = None if w0 is None else w0.shape
                mismatches.append(f"{layer}: model {w.shape} vs base {got}")
                continue
            layers[layer] = relative_change(w, w0)
    if mismatches:
        raise ConfigError("model and base checkpoints are incompatible: " + "; ".join(mismatches))
    values = list(layers.values())
    return {
        "layers": layers,
        "mean": math.fsum(values) / len(values),
        "gates": gate_values(model),
        "counts_by_tag": model.count_by_tag(),
        "trainable_params": model.trainable_count(),
    }


def diagnose_text(diag: dict) -> str:
    width = max(len(k) for k in diag["layers"])
    lines = ["[update_magnitude]"]
    lines += _kv(list(diag["layers"].items()) + [("mean", diag["mean"])], width)
    lines += ["", "[gates]"]
    lines += _kv(diag["gates"].items()) if diag["gates"] else ["(none)"]
    lines += ["", "[parameters]"]
    lines += _kv([(f"tag.{k}", v) for k, v in diag["counts_by_tag"].items()] + [("trainable", diag["trainable_params"])])
    return "\n".join(lines) + "\n"
