"""Segmentation pretraining, downstream adaptation and the rank/gate sweep."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import autodiff as ad
from ..adapters import StageGate, relative_change
from ..backbone import DEFAULT_ADAPTED, STAGES, TOY_PLAN, Network, build_network, configure, to_classifier
from ..errors import ConfigError, DivergenceError
from .data import Dataset, gen_dataset
from .methods import resolve
from .metrics import Metrics, auc_score, compute_metrics
from .optim import Adam

log = logging.getLogger(__name__)

EVAL_CHUNK = 16


def bce_loss(logits, labels) -> float:
    return float(ad.bce_with_logits(np.asarray(logits, dtype=np.float64), labels).value)


def dice_loss(mask_logits, mask) -> float:
    return float(ad.dice_loss(np.asarray(mask_logits, dtype=np.float64), mask).value)


def soft_dice(probs, mask, eps: float = 1e-6) -> float:
    p = np.asarray(probs, dtype=np.float64).ravel()
    q = np.asarray(mask, dtype=np.float64).ravel()
    return float(2.0 * np.sum(p * q) / (p.sum() + q.sum() + eps))


def _check_finite(loss: float, where: str) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} during {where}")


def _batches(rng, indices, batch_size):
    order = rng.permutation(indices)
    for i in range(0, len(order), batch_size):
        yield np.sort(order[i : i + batch_size])


# --- pretraining ---------------------------------------------------------


@dataclass
class PretrainConfig:
    seed: int = 1000
    epochs: int = 8
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 2e-5
    channel_plan: tuple[int, ...] = TOY_PLAN
    input_size: int = 32
    n_volumes: int = 40
    val_fraction: float = 0.3
    difficulty: float = 0.0
    data_seed: int = 7


@dataclass
class PretrainResult:
    net: Network
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dice: float = 0.0


def pretrain_dataset(cfg: PretrainConfig) -> Dataset:
    return gen_dataset(
        cfg.n_volumes,
        (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0),
        seed=cfg.data_seed,
        difficulty=cfg.difficulty,
        size=cfg.input_size,
    )


def validation_dice(net: Network, ds: Dataset, indices) -> float:
    scores = []
    for i in range(0, len(indices), EVAL_CHUNK):
        idx = indices[i : i + EVAL_CHUNK]
        probs = ad.logistic(net.forward_segment(ds.volumes[idx]))
        scores += [soft_dice(p, m) for p, m in zip(probs, ds.masks[idx])]
    return float(np.mean(scores))


def pretrain(cfg: PretrainConfig, dataset: Dataset | None = None) -> PretrainResult:
    ds = dataset if dataset is not None else pretrain_dataset(cfg)
    net = build_network(cfg.channel_plan, "segmentation", cfg.seed)
    params = net.parameters()
    trainable = set(net.trainable_names())
    opt = Adam(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    train, val = ds.split("train"), ds.split("val")

    best_dice = validation_dice(net, ds, val)
    best = {k: v.copy() for k, v in params.items()}
    result = PretrainResult(net, [{"epoch": 0, "train_loss": float("nan"), "val_dice": best_dice}], 0, best_dice)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in _batches(rng, train, cfg.batch_size):
            loss = ad.dice_loss(net.segment_node(ds.volumes[batch], ad.Context()), ds.masks[batch])
            value = float(loss.value)
            _check_finite(value, f"pretraining epoch {epoch}")
            opt.step(params, ad.backward(loss))
            losses.append(value)
        dice = validation_dice(net, ds, val)
        result.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": dice})
        log.info("pretrain epoch %d loss %.4f val dice %.4f", epoch, np.mean(losses), dice)
        if dice > best_dice:
            best_dice, result.best_epoch = dice, epoch
            best = {k: v.copy() for k, v in params.items()}
    for k, v in params.items():
        v[...] = best[k]
    result.best_dice = best_dice
    return result


# --- adaptation ----------------------------------------------------------


@dataclass
class AdaptConfig:
    seed: int = 1000
    epochs: int = 20
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 1e-5
    method: str = "glt"
    stages: tuple[str, ...] | None = None
    rank_ratio: float = 0.0625
    gate_init: float = 0.6
    lora_rank: int = 4
    n_subjects: int = 307
    split: tuple[float, float, float] = (0.3, 0.3, 0.4)
    difficulty: float = 0.15
    input_size: int = 32
    data_seed: int = 11

    def policy(self):
        return resolve(
            self.method, stages=self.stages, ratio=self.rank_ratio, gate_init=self.gate_init, rank=self.lora_rank
        )


@dataclass
class MetricsReport:
    method: str
    best_epoch: int
    val_auc: float | None
    test: Metrics
    val: Metrics
    trainable_params: int
    ft_params: int
    trainable_fraction: float
    breakdown: dict[str, int]
    counts_by_tag: dict[str, int]
    gates: dict[str, float]
    update_magnitudes: dict[str, float]
    mean_update_magnitude: float

    def as_dict(self):
        d = asdict(self)
        d["test"] = self.test.as_dict()
        d["val"] = self.val.as_dict()
        return d


@dataclass
class AdaptResult:
    net: Network
    report: MetricsReport
    history: list[dict]


def adapt_dataset(cfg: AdaptConfig) -> Dataset:
    return gen_dataset(cfg.n_subjects, cfg.split, seed=cfg.data_seed, difficulty=cfg.difficulty, size=cfg.input_size)


def frozen_prefix(net: Network) -> int:
    """Number of leading stages with nothing trainable."""
    stages = {net.stage_of(n) for n in net.trainable_names()}
    for i, stage in enumerate(STAGES):
        if stage in stages:
            return i
    return len(STAGES)


def cached_features(net: Network, ds: Dataset, start: int, cache: dict | None):
    key = ("features", start)
    if cache is not None and key in cache:
        return cache[key]
    chunks = [net.features(ds.volumes[i : i + EVAL_CHUNK], start) for i in range(0, len(ds), EVAL_CHUNK)]
    feats = np.concatenate(chunks)
    if cache is not None:
        cache[key] = feats
    return feats


def predict(net: Network, feats: np.ndarray, indices, start: int) -> np.ndarray:
    out = []
    for i in range(0, len(indices), EVAL_CHUNK):
        out.append(net.classify_node(feats[indices[i : i + EVAL_CHUNK]], ad.Context(), start).value)
    return np.concatenate(out) if out else np.zeros(0)


SELECTED_STAGES = DEFAULT_ADAPTED


def update_magnitudes(net: Network, base: dict[str, np.ndarray]) -> dict[str, float]:
    out = {}
    for stage in SELECTED_STAGES:
        for layer in net.blocks[stage].kernel_names:
            out[layer] = relative_change(net.effective_kernel(layer), base[f"{layer}.weight"])
    return out


def parameter_breakdown(net: Network) -> dict[str, int]:
    params = net.parameters()
    gate_names = {g.param_name for g in net.gates.values()}
    adapter_names = {n for a in net.adapters.values() for n in a.tensors()}
    out = {"adapter": 0, "gate": 0, "light": 0, "head": 0, "full": 0}
    for name in net.trainable_names():
        size = params[name].size
        if name in gate_names:
            out["gate"] += size
        elif name in adapter_names:
            out["adapter"] += size
        else:
            out[{"light-trainable": "light", "head": "head", "full": "full"}[net.tags[name]]] += size
    return out


def prepare(cfg: AdaptConfig, pretrained: Network) -> Network:
    net = to_classifier(pretrained, cfg.seed)
    return configure(net, cfg.policy(), cfg.seed)


def adapt(
    cfg: AdaptConfig,
    pretrained: Network,
    dataset: Dataset | None = None,
    cache: dict | None = None,
) -> AdaptResult:
    """Train ``cfg.method`` on top of ``pretrained`` and evaluate on the test split.

    ``cache`` may be shared between calls that use the same pretrained network
    and dataset; it holds the outputs of the frozen leading stages.
    """
    ds = dataset if dataset is not None else adapt_dataset(cfg)
    if ds.size != cfg.input_size:
        raise ConfigError(f"dataset volumes are {ds.size}^3 but input-size is {cfg.input_size}")
    base = {k: v.copy() for k, v in pretrained.encoder_params().items()}
    net = prepare(cfg, pretrained)
    params = net.parameters()
    trainable = set(net.trainable_names())
    opt = Adam(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    start = frozen_prefix(net)
    feats = cached_features(net, ds, start, cache)
    labels = ds.labels.astype(np.float64)
    train, val, test = ds.split("train"), ds.split("val"), ds.split("test")

    def val_auc():
        return auc_score(ad.logistic(predict(net, feats, val, start)), ds.labels[val])

    history = []
    best_auc, best_epoch = None, 0
    best = {k: params[k].copy() for k in trainable}
    if cfg.epochs == 0:
        best_auc = val_auc()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in _batches(rng, train, cfg.batch_size):
            loss = ad.bce_with_logits(net.classify_node(feats[batch], ad.Context(), start), labels[batch])
            value = float(loss.value)
            _check_finite(value, f"adaptation epoch {epoch}")
            if trainable:
                opt.step(params, ad.backward(loss))
            losses.append(value)
        auc = val_auc()
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auc": auc})
        log.info("adapt[%s] epoch %d loss %.4f val auc %s", cfg.method, epoch, np.mean(losses), auc)
        if auc is not None and (best_auc is None or auc > best_auc):
            best_auc, best_epoch = auc, epoch
            best = {k: params[k].copy() for k in trainable}
    for k in trainable:
        params[k][...] = best[k]

    val_scores = ad.logistic(predict(net, feats, val, start))
    test_scores = ad.logistic(predict(net, feats, test, start))
    mags = update_magnitudes(net, base)
    ft = net.full_finetune_count()
    n_train = net.trainable_count()
    report = MetricsReport(
        method=cfg.method,
        best_epoch=best_epoch,
        val_auc=best_auc,
        test=compute_metrics(test_scores, ds.labels[test]),
        val=compute_metrics(val_scores, ds.labels[val]),
        trainable_params=n_train,
        ft_params=ft,
        trainable_fraction=n_train / ft,
        breakdown=parameter_breakdown(net),
        counts_by_tag=net.count_by_tag(),
        gates={name: g.value for name, g in net.gates.items()},
        update_magnitudes=mags,
        mean_update_magnitude=float(np.mean(list(mags.values()))),
    )
    return AdaptResult(net, report, history)


def step0_loss(cfg: AdaptConfig, pretrained: Network, dataset: Dataset, indices) -> tuple[float, float]:
    """BCE of the adapted model before any step, and of the frozen backbone with the same head."""
    adapted = prepare(cfg, pretrained)
    frozen = to_classifier(pretrained, cfg.seed)
    y = dataset.labels[indices]
    x = dataset.volumes[indices]
    return bce_loss(adapted.forward_classify(x), y), bce_loss(frozen.forward_classify(x), y)


# --- sweep ----------------------------------------------------------------


@dataclass
class SweepResult:
    ratios: list[float]
    gates: list[float]
    val_auc: dict[tuple[float, float], float | None]
    best: tuple[float, float]

    @property
    def best_auc(self):
        return self.val_auc[self.best]


def sweep(cfg: AdaptConfig, pretrained: Network, ratios, gates, dataset: Dataset | None = None) -> SweepResult:
    ratios, gates = [float(r) for r in ratios], [float(g) for g in gates]
    if not ratios or not gates:
        raise ConfigError("sweep needs non-empty ratio and gate grids")
    ds = dataset if dataset is not None else adapt_dataset(cfg)
    cache: dict = {}
    table = {}
    for r in ratios:
        for g in gates:
            res = adapt(replace(cfg, rank_ratio=r, gate_init=g), pretrained, ds, cache)
            table[(r, g)] = res.report.val_auc
    # strict improvement keeps the first cell in row-major order on ties
    best = None
    for cell, auc in table.items():
        if auc is not None and (best is None or auc > table[best]):
            best = cell
    if best is None:
        best = next(iter(table))
    return SweepResult(ratios, gates, table, best)


def gate_values(net: Network) -> dict[str, float]:
    return {name: g.value for name, g in net.gates.items() if isinstance(g, StageGate)}
