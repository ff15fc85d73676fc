"""Command-line interface.

Subcommands: synth, prepare, train, eval, robust, sweep, ablate. Settings
resolve in order: built-in defaults, then a flat key=value config file, then
CROSSDIFF_* environment variables, then --set overrides, then dedicated
flags. Every command writes a run manifest next to its outputs; report files
contain no timestamps so identical runs produce identical bytes.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys

from . import __version__
from .data import (filter_and_split, generate_synthetic, ingest_log,
                   load_split, save_events, save_ground_truth, save_split,
                   survival_stats, SyntheticConfig)
from .diffusion import build_schedule
from .evaluation import (ablation_study, auto_negatives, evaluate,
                         noise_robustness, overall_ndcg, step_sweep)
from .network import VARIANTS, ModelConfig
from .trainer import TrainConfig, fit, init_state, load_checkpoint

ENV_PREFIX = "CROSSDIFF_"

# key -> (default, type tag); "opt*" types accept none/auto for None
CONFIG_SCHEMA = {
    "d": (256, "int"),
    "n_heads": (1, "int"),
    "enc_layers": (2, "int"),
    "dec_layers": (1, "int"),
    "max_seq_len": (15, "int"),
    "diffusion_steps": (50, "int"),
    "beta_start": (1e-4, "float"),
    "beta_end": (0.02, "float"),
    "lr": (1e-3, "float"),
    "batch_size": (512, "int"),
    "epochs": (100, "int"),
    "warmup_epochs": (2, "int"),
    "beta1": (0.9, "float"),
    "beta2": (0.999, "float"),
    "adam_eps": (1e-8, "float"),
    "grad_clip": (None, "optfloat"),
    "aug_rate": (0.2, "float"),
    "seed": (0, "int"),
    "min_interactions": (10, "int"),
    "min_per_domain": (3, "int"),
    "eval_seed": (101, "int"),
    "eval_every": (1, "int"),
    "checkpoint_every": (0, "int"),
    "n_negatives": (None, "optint"),
    "eval_batch_size": (64, "int"),
    "n_steps": (None, "optint"),
    "n_users": (200, "int"),
    "n_items_x": (100, "int"),
    "n_items_y": (100, "int"),
    "n_shared": (4, "int"),
    "n_specific": (2, "int"),
    "noise_rate": (0.1, "float"),
    "seq_min": (10, "int"),
    "seq_max": (15, "int"),
}


def _coerce(key: str, raw: str):
    if key not in CONFIG_SCHEMA:
        raise ValueError("unknown config key %r" % key)
    _, kind = CONFIG_SCHEMA[key]
    raw = raw.strip()
    if kind.startswith("opt") and raw.lower() in ("none", "auto", ""):
        return None
    base = {"int": int, "optint": int, "float": float, "optfloat": float}[kind]
    try:
        return base(raw)
    except ValueError:
        raise ValueError("config key %r expects %s, got %r" % (key, kind, raw))


def _load_config_file(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("%s line %d: expected key=value" % (path, line_no))
            key, raw = (s.strip() for s in line.split("=", 1))
            out[key] = _coerce(key, raw)
    return out


def resolve_config(args) -> dict:
    cfg = {k: d for k, (d, _) in CONFIG_SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(_load_config_file(args.config))
    for key in CONFIG_SCHEMA:
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            cfg[key] = _coerce(key, env)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError("--set expects key=value, got %r" % item)
        key, raw = (s.strip() for s in item.split("=", 1))
        cfg[key] = _coerce(key, raw)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _model_cfg(cfg: dict, vocab_x_size: int, vocab_y_size: int) -> ModelConfig:
    return ModelConfig(d=cfg["d"], n_heads=cfg["n_heads"],
                       enc_layers=cfg["enc_layers"], dec_layers=cfg["dec_layers"],
                       max_seq_len=cfg["max_seq_len"], T=cfg["diffusion_steps"],
                       vocab_x_size=vocab_x_size, vocab_y_size=vocab_y_size)


def _train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"],
                       epochs=cfg["epochs"], warmup_epochs=cfg["warmup_epochs"],
                       beta1=cfg["beta1"], beta2=cfg["beta2"],
                       adam_eps=cfg["adam_eps"], grad_clip=cfg["grad_clip"],
                       aug_rate=cfg["aug_rate"], seed=cfg["seed"])


def _schedule(cfg: dict):
    return build_schedule(cfg["diffusion_steps"], cfg["beta_start"], cfg["beta_end"])


# ---------------------------------------------------------------------------
# manifests and reports

def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, cfg: dict, inputs: list,
                    outputs: list, started: str) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "inputs": {p: _sha256(p) for p in inputs if os.path.isfile(p)},
        "outputs": sorted(outputs),
        "started_at": started,
        "finished_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _fmt(x: float) -> str:
    return "%.10g" % x


def _report_rows(part_name: str, report) -> list:
    rows = []
    tot = {"n": 0, "mrr": 0.0, "h5": 0.0, "h10": 0.0, "n5": 0.0, "n10": 0.0}
    for dom in sorted(report.per_domain):
        mv = report.per_domain[dom]
        rows.append([part_name, dom, mv.n_users, mv.mrr, mv.hit[5], mv.hit[10],
                     mv.ndcg[5], mv.ndcg[10]])
        tot["n"] += mv.n_users
        for key, val in (("mrr", mv.mrr), ("h5", mv.hit[5]), ("h10", mv.hit[10]),
                         ("n5", mv.ndcg[5]), ("n10", mv.ndcg[10])):
            tot[key] += val * mv.n_users
    n = tot["n"]
    rows.append([part_name, "overall", n, tot["mrr"] / n, tot["h5"] / n,
                 tot["h10"] / n, tot["n5"] / n, tot["n10"] / n])
    return rows


def write_metrics_csv(path: str, named_reports) -> None:
    """One row per (part, domain) plus overall; raw and x100 columns."""
    header = ["part", "domain", "n_users", "mrr", "hit5", "hit10", "ndcg5", "ndcg10",
              "mrr_x100", "hit5_x100", "hit10_x100", "ndcg5_x100", "ndcg10_x100"]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for part_name, report in named_reports:
            for row in _report_rows(part_name, report):
                vals = row[3:]
                cells = [row[0], row[1], str(row[2])]
                cells += [_fmt(v) for v in vals]
                cells += [_fmt(100.0 * v) for v in vals]
                fh.write(",".join(cells) + "\n")


def _print_report(title: str, report) -> None:
    print(title)
    print("  %-8s %8s %10s %10s %10s %10s %10s"
          % ("domain", "users", "MRR", "H@5", "H@10", "N@5", "N@10"))
    for row in _report_rows("-", report):
        print("  %-8s %8d %10.4f %10.4f %10.4f %10.4f %10.4f"
              % (row[1], row[2], row[3], row[4], row[5], row[6], row[7]))


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    started = _now()
    os.makedirs(args.out, exist_ok=True)
    scfg = SyntheticConfig(n_users=cfg["n_users"], n_items_x=cfg["n_items_x"],
                           n_items_y=cfg["n_items_y"],
                           n_shared_interests=cfg["n_shared"],
                           n_specific_interests=cfg["n_specific"],
                           noise_rate=cfg["noise_rate"],
                           seq_len_range=(cfg["seq_min"], cfg["seq_max"]),
                           rng_seed=cfg["seed"])
    events, truth = generate_synthetic(scfg)
    events_path = os.path.join(args.out, "events.tsv")
    truth_path = os.path.join(args.out, "ground_truth.json")
    save_events(events, events_path)
    save_ground_truth(truth, truth_path)
    _write_manifest(args.out, "synth", cfg, [], [events_path, truth_path], started)
    print("wrote %d events for %d users to %s" % (len(events), cfg["n_users"], args.out))
    return 0


def cmd_prepare(args) -> int:
    cfg = resolve_config(args)
    for key in ("min_interactions", "min_per_domain", "max_seq_len"):
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    started = _now()
    events, row_errors = ingest_log(args.input, fmt=args.format)
    if row_errors:
        print("skipped %d malformed rows (first: line %d: %s)"
              % (len(row_errors), row_errors[0][0], row_errors[0][1]),
              file=sys.stderr)
    stats = survival_stats(events, cfg["min_interactions"], cfg["min_per_domain"],
                           cfg["max_seq_len"])
    split = filter_and_split(events, cfg["min_interactions"], cfg["min_per_domain"],
                             cfg["max_seq_len"])
    os.makedirs(args.out, exist_ok=True)
    save_split(split, args.out)
    stats.update({"n_items_x": split.vocab_x.n_items,
                  "n_items_y": split.vocab_y.n_items,
                  "n_row_errors": len(row_errors)})
    stats_path = os.path.join(args.out, "stats.json")
    with open(stats_path, "w") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
    outputs = [os.path.join(args.out, p) for p in
               ("vocab.json", "train.jsonl", "valid.jsonl", "test.jsonl")]
    _write_manifest(args.out, "prepare", cfg, [args.input],
                    outputs + [stats_path], started)
    print("survival:")
    for key in sorted(stats):
        print("  %-28s %d" % (key, stats[key]))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    started = _now()
    split = load_split(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.resume:
        state = load_checkpoint(os.path.join(args.out, "latest"))
    else:
        model_cfg = _model_cfg(cfg, split.vocab_x.size, split.vocab_y.size)
        state = init_state(model_cfg, _train_cfg(cfg), _schedule(cfg),
                           variant=args.variant)
    fit(state, split, out_dir=args.out, eval_every=cfg["eval_every"],
        checkpoint_every=cfg["checkpoint_every"], eval_negatives=cfg["n_negatives"],
        eval_seed=cfg["eval_seed"], eval_steps=cfg["n_steps"], verbose=True)
    hist_path = os.path.join(args.out, "history.csv")
    with open(hist_path, "w") as fh:
        fh.write("epoch,stage,l_diff,l_rec,l_tri_cl,l_total,val_ndcg10\n")
        for rec in state.history:
            fh.write("%d,%s,%s,%s,%s,%s,%s\n"
                     % (rec["epoch"], rec["stage"], _fmt(rec["l_diff"]),
                        _fmt(rec["l_rec"]), _fmt(rec["l_tri_cl"]),
                        _fmt(rec["l_total"]),
                        _fmt(rec["val_ndcg10"]) if "val_ndcg10" in rec else ""))
    _write_manifest(args.out, "train", cfg, [os.path.join(args.data, "vocab.json")],
                    [hist_path, os.path.join(args.out, "latest", "params.bin")],
                    started)
    return 0


def _load_model(args, use_best: bool):
    state = load_checkpoint(args.checkpoint)
    if use_best:
        if state.best_params is None:
            raise ValueError("checkpoint has no best-parameter snapshot")
        state.params.from_vector(state.best_params)
    return state


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    started = _now()
    split = load_split(args.data)
    state = _load_model(args, args.use_best)
    part = split.test if args.part == "test" else split.validation
    n_neg = cfg["n_negatives"] or auto_negatives(split)
    report = evaluate(part, state.params, state.model_cfg, state.sched,
                      state.variant_name, split.vocab_x, split.vocab_y,
                      seed=cfg["eval_seed"], n_steps=cfg["n_steps"],
                      n_negatives=n_neg, batch_size=cfg["eval_batch_size"],
                      trained_steps=state.global_step)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(path, [(args.part, report)])
    _write_manifest(args.out, "eval", cfg,
                    [os.path.join(args.checkpoint, "params.bin")], [path], started)
    _print_report("%s metrics (%d negatives, %d steps):"
                  % (args.part, n_neg, report.fingerprint["n_steps"]), report)
    return 0


def cmd_robust(args) -> int:
    cfg = resolve_config(args)
    started = _now()
    split = load_split(args.data)
    state = _load_model(args, args.use_best)
    rates = [float(r) for r in args.rates.split(",")]
    n_neg = cfg["n_negatives"] or auto_negatives(split)
    rows = noise_robustness(split.test, state.params, state.model_cfg, state.sched,
                            state.variant_name, split.vocab_x, split.vocab_y,
                            rates, seed=cfg["eval_seed"], n_steps=cfg["n_steps"],
                            n_negatives=n_neg, batch_size=cfg["eval_batch_size"],
                            trained_steps=state.global_step)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "robustness.csv")
    with open(path, "w") as fh:
        fh.write("noise_rate,ndcg10,ndcg10_x100,retained\n")
        for row in rows:
            fh.write("%s,%s,%s,%s\n" % (_fmt(row["noise_rate"]), _fmt(row["ndcg10"]),
                                        _fmt(100 * row["ndcg10"]), _fmt(row["retained"])))
    _write_manifest(args.out, "robust", cfg,
                    [os.path.join(args.checkpoint, "params.bin")], [path], started)
    print("noise_rate  ndcg@10  retained")
    for row in rows:
        print("  %8.2f  %7.4f  %8.4f" % (row["noise_rate"], row["ndcg10"],
                                         row["retained"]))
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    started = _now()
    split = load_split(args.data)
    state = _load_model(args, args.use_best)
    counts = [int(s) for s in args.steps.split(",")]
    n_neg = cfg["n_negatives"] or auto_negatives(split)
    rows = step_sweep(split.test, state.params, state.model_cfg, state.sched,
                      state.variant_name, split.vocab_x, split.vocab_y, counts,
                      seed=cfg["eval_seed"], n_negatives=n_neg,
                      batch_size=cfg["eval_batch_size"],
                      trained_steps=state.global_step)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    with open(path, "w") as fh:
        fh.write("n_steps,ndcg10,ndcg10_x100\n")
        for row in rows:
            fh.write("%d,%s,%s\n" % (row["n_steps"], _fmt(row["ndcg10"]),
                                     _fmt(100 * row["ndcg10"])))
    _write_manifest(args.out, "sweep", cfg,
                    [os.path.join(args.checkpoint, "params.bin")], [path], started)
    print("n_steps  ndcg@10")
    for row in rows:
        print("  %5d  %7.4f" % (row["n_steps"], row["ndcg10"]))
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    started = _now()
    split = load_split(args.data)
    variants = (list(VARIANTS) if args.variants == "all"
                else [v.strip() for v in args.variants.split(",")])
    for v in variants:
        if v not in VARIANTS:
            raise ValueError("unknown variant %r (known: %s)" % (v, sorted(VARIANTS)))
    seeds = [int(s) for s in args.seeds.split(",")]
    model_cfg = _model_cfg(cfg, split.vocab_x.size, split.vocab_y.size)
    rows = ablation_study(split, variants, model_cfg, _train_cfg(cfg),
                          _schedule(cfg), seeds=seeds, eval_seed=cfg["eval_seed"],
                          n_negatives=cfg["n_negatives"], eval_steps=cfg["n_steps"])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "ablation.csv")
    with open(path, "w") as fh:
        fh.write("variant,n_seeds,ndcg10_mean,ndcg10_mean_x100,per_seed\n")
        for row in rows:
            fh.write("%s,%d,%s,%s,%s\n"
                     % (row["variant"], len(seeds), _fmt(row["ndcg10_mean"]),
                        _fmt(100 * row["ndcg10_mean"]),
                        ";".join(_fmt(v) for v in row["per_seed"])))
    _write_manifest(args.out, "ablate", cfg,
                    [os.path.join(args.data, "vocab.json")], [path], started)
    print("variant          ndcg@10 (mean over %d seeds)" % len(seeds))
    for row in rows:
        print("  %-14s %8.4f" % (row["variant"], row["ndcg10_mean"]))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int, help="root RNG seed")

    p = argparse.ArgumentParser(prog="crossdiff",
                                description="cross-domain recommendation via "
                                            "guided diffusion")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", parents=[common],
                        help="generate a synthetic two-domain interaction log")
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_synth)

    pp = sub.add_parser("prepare", parents=[common],
                        help="ingest, filter, and split an interaction log")
    pp.add_argument("--input", required=True)
    pp.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    pp.add_argument("--out", required=True)
    pp.add_argument("--min-interactions", type=int, default=None,
                    help="drop users with fewer total interactions")
    pp.add_argument("--min-per-domain", type=int, default=None,
                    help="drop users below this count in either domain")
    pp.add_argument("--max-seq-len", type=int, default=None,
                    help="keep only the most recent items per user")
    pp.set_defaults(func=cmd_prepare)

    pt = sub.add_parser("train", parents=[common], help="train a model")
    pt.add_argument("--data", required=True, help="prepared split directory")
    pt.add_argument("--out", required=True, help="run directory for checkpoints")
    pt.add_argument("--variant", default="full", choices=sorted(VARIANTS))
    pt.add_argument("--resume", action="store_true",
                    help="continue from <out>/latest")
    pt.set_defaults(func=cmd_train)

    def eval_like(name, help_text):
        q = sub.add_parser(name, parents=[common], help=help_text)
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--use-best", action="store_true",
                       help="evaluate the best-validation snapshot")
        return q

    pe = eval_like("eval", "ranking metrics on a held-out part")
    pe.add_argument("--part", choices=("test", "valid"), default="test")
    pe.set_defaults(func=cmd_eval)

    pr = eval_like("robust", "metric decay under history corruption")
    pr.add_argument("--rates", default="0,0.1,0.2,0.3")
    pr.set_defaults(func=cmd_robust)

    pw = eval_like("sweep", "metrics versus reverse-chain length")
    pw.add_argument("--steps", default="1,2,5,10,25,50")
    pw.set_defaults(func=cmd_sweep)

    pa = sub.add_parser("ablate", parents=[common],
                        help="train and evaluate model variants")
    pa.add_argument("--data", required=True)
    pa.add_argument("--out", required=True)
    pa.add_argument("--variants", default="all")
    pa.add_argument("--seeds", default="0,1,2")
    pa.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
