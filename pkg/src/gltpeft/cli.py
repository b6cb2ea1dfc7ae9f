"""``gltpeft`` command line: gen-data, pretrain, adapt, sweep, diagnose.

Each command reads the ``[command]`` section of ``--config`` (optional) and
then any ``--key value`` flags, which win over the file.  The resolved config
is echoed to ``<output-dir>/config.resolved.ini``.

Exit codes: 0 success, 2 configuration or validation error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import checkpoint
from . import config as C
from .backbone import STAGES, from_state, state
from .errors import ConfigError, ContractError, DivergenceError, ShapeError
from .harness.data import gen_dataset, load_dataset, save_dataset
from .harness.training import AdaptConfig, PretrainConfig, adapt, adapt_dataset, pretrain, sweep
from .reports import diagnose, diagnose_text, metrics_text, sweep_dict, sweep_table, to_json

log = logging.getLogger("gltpeft")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _output_dir(cfg) -> Path:
    out = Path(cfg["output-dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cell(v):
    if v is None or (isinstance(v, float) and v != v):
        return ""
    return repr(v) if isinstance(v, float) else v


def _write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_cell(row[f]) for f in fields])


def _load_network(path):
    try:
        records = checkpoint.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_state(records)


def _dataset(cfg, fallback):
    if cfg["dataset"]:
        try:
            return load_dataset(cfg["dataset"])
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {cfg['dataset']}: {exc}") from exc
    return fallback()


def _adapt_config(cfg) -> AdaptConfig:
    return AdaptConfig(
        seed=cfg["seed"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch-size"],
        lr=cfg["lr"],
        weight_decay=cfg["weight-decay"],
        method=cfg["method"],
        stages=cfg["stages"] or None,
        rank_ratio=cfg["rank-ratio"],
        gate_init=cfg["gate-init"],
        lora_rank=cfg["lora-rank"],
        n_subjects=cfg["n-subjects"],
        split=tuple(cfg["split"]),
        difficulty=cfg["difficulty"],
        input_size=cfg["input-size"],
        data_seed=cfg["data-seed"],
    )


def _pretrained(cfg):
    net = _load_network(cfg["checkpoint"])
    plan = cfg["channel-plan"]
    if plan and tuple(plan) != net.plan:
        diff = [f"{s}: config {a} vs checkpoint {b}" for s, a, b in zip(STAGES, plan, net.plan) if a != b]
        if len(plan) != len(net.plan):
            diff = [f"config has {len(plan)} stages, checkpoint {len(net.plan)}"]
        raise ConfigError("checkpoint incompatible with channel-plan: " + "; ".join(diff))
    return net


# --- commands ----------------------------------------------------------------


def cmd_gen_data(cfg):
    out = _output_dir(cfg)
    ds = gen_dataset(cfg["n-subjects"], cfg["split"], seed=cfg["seed"], difficulty=cfg["difficulty"], size=cfg["input-size"])
    path = save_dataset(out / "data.ckpt", ds)
    print(f"wrote {path} ({len(ds)} volumes of {ds.size}^3)")


def cmd_pretrain(cfg):
    out = _output_dir(cfg)
    pc = PretrainConfig(
        seed=cfg["seed"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch-size"],
        lr=cfg["lr"],
        weight_decay=cfg["weight-decay"],
        channel_plan=tuple(cfg["channel-plan"]),
        input_size=cfg["input-size"],
        n_volumes=cfg["n-volumes"],
        val_fraction=cfg["val-fraction"],
        difficulty=cfg["difficulty"],
        data_seed=cfg["data-seed"],
    )
    ds = _dataset(cfg, lambda: None)
    if ds is not None and ds.size != pc.input_size:
        raise ConfigError(f"dataset volumes are {ds.size}^3 but input-size is {pc.input_size}")
    res = pretrain(pc, ds)
    checkpoint.save(out / "pretrained.ckpt", state(res.net))
    _write_csv(out / "log.csv", res.history, ["epoch", "train_loss", "val_dice"])
    print(f"best epoch {res.best_epoch}: val dice {res.best_dice:.4f}")
    print(f"wrote {out / 'pretrained.ckpt'}")


def cmd_adapt(cfg):
    out = _output_dir(cfg)
    ac = _adapt_config(cfg)
    ac.policy()
    pre = _pretrained(cfg)
    ds = _dataset(cfg, lambda: adapt_dataset(ac))
    res = adapt(ac, pre, ds)
    checkpoint.save(out / "model.ckpt", state(res.net))
    (out / "metrics.txt").write_text(metrics_text(res.report))
    (out / "metrics.json").write_text(to_json(res.report.as_dict()))
    _write_csv(out / "log.csv", res.history, ["epoch", "train_loss", "val_auc"])
    rep = res.report
    auc = "n/a" if rep.test.auc is None else f"{rep.test.auc:.4f}"
    print(f"{rep.method}: test auc {auc}, {rep.trainable_params} trainable params ({rep.trainable_fraction:.2%} of FT)")
    for stage, g in rep.gates.items():
        print(f"  gate {stage} = {g:.4f}")


def cmd_sweep(cfg):
    out = _output_dir(cfg)
    ac = _adapt_config(cfg)
    ac.policy()
    pre = _pretrained(cfg)
    ds = _dataset(cfg, lambda: adapt_dataset(ac))
    res = sweep(ac, pre, cfg["ratios"], cfg["gates"], ds)
    table = sweep_table(res)
    (out / "sweep.txt").write_text(table)
    (out / "sweep.json").write_text(to_json(sweep_dict(res)))
    print(table, end="")


def cmd_diagnose(cfg):
    model = _load_network(cfg["model"])
    base = _load_network(cfg["base"])
    diag = diagnose(model, base)
    text = diagnose_text(diag)
    if cfg["output-dir"]:
        out = _output_dir(cfg)
        (out / "diagnose.txt").write_text(text)
        (out / "diagnose.json").write_text(to_json(diag))
    print(text, end="")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic ellipsoid dataset"),
    "pretrain": (cmd_pretrain, "pretrain the segmentation backbone"),
    "adapt": (cmd_adapt, "adapt a pretrained backbone to classification"),
    "sweep": (cmd_sweep, "rank-ratio x gate grid of validation AUC"),
    "diagnose": (cmd_diagnose, "relative update magnitudes of a model against its base"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gltpeft", description="Gated Tucker adapters for 3D conv nets.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="INI file; keys are read from its [%s] section" % name)
        for key, schema_key in C.SCHEMA[name].items():
            default = "required" if schema_key.default is C.REQUIRED else f"default: {C._format(schema_key.kind, schema_key.default) or '(empty)'}"
            flags = [f"--{key}"] + (["-o"] if key == "output-dir" else [])
            p.add_argument(*flags, dest=key, metavar="VALUE", help=default)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    name = args.command
    fn = COMMANDS[name][0]
    try:
        raw = C.read_file(args.config, name) if args.config else {}
        raw.update({k: v for k, v in vars(args).items() if k in C.SCHEMA[name] and v is not None})
        cfg = C.resolve(name, raw)
        if cfg.get("output-dir"):
            C.write(_output_dir(cfg) / "config.resolved.ini", name, cfg)
        fn(cfg)
    except (ConfigError, ShapeError, ContractError) as exc:
        print(f"gltpeft {name}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"gltpeft {name}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
