"""The `gps` command line tool.

Subcommands wire the pipeline stages together:

  pretrain   train a model from scratch on the source task
  select     build a parameter mask from a base checkpoint
  finetune   masked training on the target task, emits delta
  eval       accuracy of a checkpoint on a dataset split
  compare    run several strategies/budgets, emit a CSV table
  report     mask distribution or overlap analysis

Every subcommand takes --config plus targeted overrides and writes the
fully resolved configuration into its output directory. Exit codes:
0 success, 2 configuration, 3 data/format, 4 numeric, 5 integrity.
"""

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys
import time

from . import config as cf
from . import delta as dl
from .errors import (
    CompatibilityError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    GpsError,
    InputError,
    IntegrityError,
    NumericError,
    StateError,
)
from .models import FLAG_HEAD, build_model, enumerate_neurons
from .selection import FULL, accumulate_gradients, build_mask, full_mask, neuron_budget
from .training import evaluate, finetune

_GRADIENT_STRATEGIES = ("neuron-topk", "net-topfrac", "layer-topfrac")

EXIT_CODES = (
    (IntegrityError, 5),
    (NumericError, 4),
    (FormatError, 3),
    (InputError, 3),
    (DimensionError, 3),
    (CompatibilityError, 3),
    (ConfigError, 2),
    (ContractError, 2),
    (StateError, 2),
)


def _exit_code(exc):
    for kind, code in EXIT_CODES:
        if isinstance(exc, kind):
            return code
    return 2


def _prepare_out(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    cf.write_resolved(cfg, os.path.join(out, "resolved.cfg"))
    return out


def _write_metrics(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")


def _load_base(cfg, key="base"):
    path = cfg[key] or cfg["base"]
    if not path:
        raise ConfigError(f"this command needs a checkpoint path in {key!r}")
    return dl.load_checkpoint(path, cf.model_spec(cfg))


def _build_mask_for(model, train_set, scfg):
    snapshot = None
    if scfg.strategy in _GRADIENT_STRATEGIES:
        snapshot = accumulate_gradients(model, train_set, scfg)
    return build_mask(model, scfg, snapshot=snapshot)


def _nonhead_count(model):
    return sum(
        p.data.size for n, p in model.params.items() if not model.flags[n] & FLAG_HEAD
    )


# ---------------------------------------------------------------- commands


def cmd_pretrain(cfg):
    out = _prepare_out(cfg)
    model = build_model(cf.model_spec(cfg))
    train_set, val_set, test_set = cf.load_task(cfg)
    tuned, history = finetune(model, full_mask(model), train_set, val_set, cf.train_config(cfg))
    dl.save_checkpoint(tuned, os.path.join(out, "base.gpsw"))
    _write_metrics(history, os.path.join(out, "metrics.jsonl"))
    test_acc, test_loss = evaluate(tuned, test_set)
    summary = {
        "checkpoint": os.path.join(out, "base.gpsw"),
        "digest": f"{dl.checkpoint_digest(tuned):#018x}",
        "final_val_acc": history[-1]["val_acc"] if history else None,
        "test_acc": test_acc,
    }
    print(json.dumps(summary))
    return 0


def cmd_select(cfg):
    out = _prepare_out(cfg)
    model = _load_base(cfg)
    train_set, _, _ = cf.load_task(cfg)
    scfg = cf.selection_config(cfg)
    mask = _build_mask_for(model, train_set, scfg)
    dl.save_mask(mask, os.path.join(out, "mask.gpsm"))

    selectable = model.selectable_count()
    lines = [f"strategy: {mask.strategy}"]
    if mask.strategy == "bias-only":
        lines.append("selected: 0 matrix parameters")
        lines.append(f"bias parameters: {mask.popcount()}")
    else:
        count = mask.popcount()
        pct = 100.0 * count / selectable if selectable else 0.0
        lines.append(f"selected: {count}/{selectable} = {pct:.2f}%")
    dist = dl.mask_distribution(mask, model)
    for blk in sorted(dist["blocks"]):
        entry = dist["blocks"][blk]
        lines.append(f"block {blk}: {entry['count']} ({100.0 * entry['fraction']:.2f}%)")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_finetune(cfg):
    out = _prepare_out(cfg)
    base = _load_base(cfg)
    if not cfg["mask"]:
        raise ConfigError("finetune needs a mask path in 'mask'")
    mask = dl.load_mask(cfg["mask"], model=base)
    train_set, val_set, test_set = cf.load_task(cfg)
    tuned, history = finetune(
        base, mask, train_set, val_set, cf.train_config(cfg),
        freeze_head=cfg["train.freeze_head"],
    )
    # frozen-complement check happens here, before anything is written
    sparse = dl.export_delta(base, tuned, mask)
    dl.save_checkpoint(tuned, os.path.join(out, "tuned.gpsw"))
    dl.save_delta(sparse, os.path.join(out, "delta.gpsd"))
    _write_metrics(history, os.path.join(out, "metrics.jsonl"))
    test_acc, test_loss = evaluate(tuned, test_set)
    summary = {
        "tuned": os.path.join(out, "tuned.gpsw"),
        "delta_entries": len(sparse.entries),
        "final_val_acc": history[-1]["val_acc"] if history else None,
        "test_acc": test_acc,
    }
    print(json.dumps(summary))
    return 0


def cmd_eval(cfg):
    out = _prepare_out(cfg)
    model = _load_base(cfg, key="ckpt")
    splits = dict(zip(("train", "val", "test"), cf.load_task(cfg)))
    dataset = splits[cfg["data.split"]]
    acc, loss = evaluate(model, dataset)
    result = {"split": cfg["data.split"], "n": int(dataset.y.shape[0]), "acc": acc, "loss": loss}
    with open(os.path.join(out, "eval.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(result) + "\n")
    print(json.dumps(result))
    return 0


def _compare_run(base, cfg, train_set, val_set, strategy, k, seed_offset, row_dir):
    """One isolated compare run; returns (params, val_acc, seconds)."""
    started = time.perf_counter()
    model = base.clone()
    scfg = cf.selection_config(cfg, strategy=strategy, k=k)
    scfg = dataclasses.replace(scfg, seed=scfg.seed + seed_offset)
    if strategy == "net-topfrac":
        # budget-matched: p derived from the neuron-topk count at this K
        snapshot = accumulate_gradients(model, train_set, scfg)
        total = sum(model.params[n].data.size for n in model.selectable_names())
        matched = neuron_budget(enumerate_neurons(model), k)
        scfg = dataclasses.replace(scfg, p=(matched - 0.5) / total)
        mask = build_mask(model, scfg, snapshot=snapshot)
    else:
        mask = _build_mask_for(model, train_set, scfg)
    tcfg = cf.train_config(cfg)
    tcfg = dataclasses.replace(tcfg, seed=tcfg.seed + seed_offset)
    tuned, history = finetune(model, mask, train_set, val_set, tcfg)
    if history:
        acc = history[-1]["val_acc"]
    else:
        acc, _ = evaluate(tuned, val_set)
    if seed_offset == 0:
        dl.save_mask(mask, os.path.join(row_dir, "mask.gpsm"))
    _write_metrics(history, os.path.join(row_dir, f"metrics-s{seed_offset}.jsonl"))
    return mask.popcount(), acc, time.perf_counter() - started


def _compare_row(base, cfg, train_set, val_set, strategy, k, seeds, row_dir):
    os.makedirs(row_dir, exist_ok=True)
    row_cfg = dict(cfg)
    row_cfg["select.strategy"] = strategy
    row_cfg["select.k"] = k
    row_cfg["out"] = row_dir
    cf.write_resolved(row_cfg, os.path.join(row_dir, "resolved.cfg"))
    params = []
    accs = []
    seconds = []
    for offset in range(seeds):
        p, a, s = _compare_run(base, cfg, train_set, val_set, strategy, k, offset, row_dir)
        params.append(p)
        accs.append(a)
        seconds.append(s)
    mean = sum(accs) / len(accs)
    if len(accs) > 1:
        var = sum((a - mean) ** 2 for a in accs) / len(accs)
        acc_text = f"{mean:.4f}+-{var ** 0.5:.4f}"
    else:
        acc_text = f"{mean:.4f}"
    return params[0], acc_text, sum(seconds)


def cmd_compare(cfg):
    out = _prepare_out(cfg)
    base = _load_base(cfg)
    train_set, val_set, _ = cf.load_task(cfg)
    ks = cfg["compare.ks"] or (cfg["select.k"],)
    rows = [(s, k) for s in cfg["compare.strategies"] for k in ks]
    seeds = cfg["compare.seeds"]
    if seeds < 1:
        raise ConfigError(f"compare.seeds must be >= 1, got {seeds}")
    nmap = enumerate_neurons(base)
    denom = _nonhead_count(base)

    threads = os.environ.get("GPS_THREADS", "1")
    try:
        threads = max(1, int(threads))
    except ValueError:
        raise ConfigError(f"GPS_THREADS must be an integer, got {threads!r}") from None

    def run_row(item):
        strategy, k = item
        row_dir = os.path.join(out, "rows", f"{strategy}-k{k}")
        try:
            params, acc_text, secs = _compare_row(
                base, cfg, train_set, val_set, strategy, k, seeds, row_dir
            )
            return strategy, k, params, acc_text, secs, None
        except GpsError as exc:
            return strategy, k, None, None, None, exc

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_row, rows))
    else:
        results = [run_row(item) for item in rows]

    lines = ["strategy,budget,params,params_pct,val_acc,seconds"]
    for strategy, k, params, acc_text, secs, exc in results:
        budget = neuron_budget(nmap, k) if strategy not in ("bias-only", "linear-only", FULL) else ""
        if exc is not None:
            lines.append(f"{strategy},{budget},,,FAILED({type(exc).__name__}),")
            continue
        pct = 100.0 * params / denom if denom else 0.0
        lines.append(f"{strategy},{budget},{params},{pct:.2f},{acc_text},{secs:.2f}")
    table = "\n".join(lines) + "\n"
    with open(os.path.join(out, "results.csv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_report(cfg):
    out = _prepare_out(cfg)
    paths = cfg["report.masks"]
    if not paths:
        raise ConfigError("report needs mask paths in report.masks")
    model = None
    if cfg["base"]:
        model = _load_base(cfg)
    masks = [dl.load_mask(p, model=model) for p in paths]

    lines = []
    rows = []
    if cfg["report.kind"] == "distribution":
        rows.append("mask,block,count,fraction")
        for path, mask in zip(paths, masks):
            dist = dl.mask_distribution(mask, model)
            lines.append(f"{path}: {dist['total']} selected")
            for blk in sorted(dist["blocks"]):
                entry = dist["blocks"][blk]
                lines.append(
                    f"  block {blk}: {entry['count']} ({100.0 * entry['fraction']:.2f}%)"
                )
                rows.append(f"{path},{blk},{entry['count']},{entry['fraction']:.6f}")
    else:
        if not 2 <= len(masks) <= 3:
            raise ConfigError(f"overlap report needs 2 or 3 masks, got {len(masks)}")
        rows.append("mask_a,mask_b,jaccard,shared,only_a,only_b")
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                ov = dl.mask_overlap(masks[i], masks[j])
                lines.append(
                    f"{paths[i]} vs {paths[j]}: jaccard {ov['jaccard']:.6f} "
                    f"(shared {ov['shared']}, only_a {ov['only_a']}, only_b {ov['only_b']})"
                )
                rows.append(
                    f"{paths[i]},{paths[j]},{ov['jaccard']:.6f},"
                    f"{ov['shared']},{ov['only_a']},{ov['only_b']}"
                )
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    print(text, end="")
    return 0


# ---------------------------------------------------------------- entry


COMMANDS = {
    "pretrain": cmd_pretrain,
    "select": cmd_select,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "report": cmd_report,
}


def make_parser():
    parser = argparse.ArgumentParser(prog="gps", description="gradient-guided sparse fine-tuning")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--k", type=int, help="override select.k")
        p.add_argument("--strategy", help="override select.strategy")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    overrides = {
        "select.k": args.k,
        "select.strategy": args.strategy,
        "seed": args.seed,
        "out": args.out,
    }
    try:
        cfg = cf.load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except GpsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
