"""Command-line front end: ``gen-data``, ``train``, ``eval``, ``ablate-k``.

Every command reads one flat JSON config. Unknown keys and wrongly typed
values are rejected before any work starts. Exit codes: 0 success, 2
configuration error, 3 runtime error.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from .data import (
    SynthConfig,
    generate_synthetic,
    load_image_directory,
    make_benchmark_split,
    read_manifest,
    split_from_manifest,
    write_image_directory,
    write_manifest,
)
from .errors import ConfigurationError, PalmFLError
from .evaluation import evaluate, write_roc_csv
from .federation import ClientState, FederationConfig, FederationResult, run_federation, write_round_log
from .losses import LossWeights
from .models import ExpertConfig, load_model, save_model

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# name -> (accepted types, default)
SCHEMA = {
    "method": (str, "fedpalm"),
    "data_dir": (str, "data"),
    "out": (str, "run"),
    "seed": (int, 0),
    "seeds": (list, None),
    "k_list": (list, None),
    "n_clients": (int, 4),
    "rounds": (int, 9),
    "local_epochs": (int, 2),
    "k": (int, 3),
    "lr": ((int, float), 0.01),
    "batch_size": (int, 8),
    "tau": ((int, float), 0.07),
    "w_ce": ((int, float), 0.8),
    "w_con": ((int, float), 0.2),
    "teim_from_start": (bool, False),
    "n_filters": (int, 8),
    "kernel_size": (int, 9),
    "stride": (int, 2),
    "pool": (int, 4),
    "hidden": (int, 64),
    "template_dim": (int, 32),
    "augment_shift": (int, 2),
    "augment_noise": ((int, float), 0.02),
    "workers": (int, 1),
    "identities_per_client": (int, 8),
    "samples_per_identity": (int, 10),
    "image_size": (int, 32),
    "gratings_min": (int, 3),
    "gratings_max": (int, 5),
    "jitter_px": ((int, float), 2.5),
    "jitter_rot": ((int, float), 0.2),
    "noise_sigma": ((int, float), 0.15),
    "domain_strength": ((int, float), 0.8),
    "data_seed": (int, 0),
}
# Keys that never change numerical results and so stay out of the hash.
UNHASHED = ("out", "workers", "seeds", "k_list")

ABLATION_REFERENCE = {
    "note": "published IITD open-set values; dataset-bound, not reproducible at desk scale",
    "reproducible_at_desk_scale": False,
    "eer": {"baseline": 0.0706, "teim_from_start": 0.0790, "K=1": 0.0671, "K=3": 0.0618, "K=8": 0.0789},
    "acc": {"baseline": 0.9457, "teim_from_start": 0.9087, "K=1": 0.9391, "K=3": 0.9478, "K=8": 0.9152},
    "auc": {"baseline": 0.9751, "teim_from_start": 0.9741, "K=1": 0.9793, "K=3": 0.9809, "K=8": 0.9744},
}


def validate_config(raw):
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (types, default) in SCHEMA.items():
        value = raw.get(key, default)
        if value is not None:
            bad_bool = isinstance(value, bool) and types is not bool
            if bad_bool or not isinstance(value, types):
                raise ConfigurationError(f"config key {key!r} has wrong type {type(value).__name__}")
        cfg[key] = value
    for key in ("seeds", "k_list"):
        if cfg[key] is not None and not all(isinstance(v, int) and not isinstance(v, bool) for v in cfg[key]):
            raise ConfigurationError(f"{key} must be a list of integers")
    if cfg["method"] not in ("fedpalm", "fedavg", "local"):
        raise ConfigurationError(f"unknown method {cfg['method']!r}")
    if not 0 <= cfg["seed"] < 2**64 or not 0 <= cfg["data_seed"] < 2**64:
        raise ConfigurationError("seeds must be unsigned 64-bit integers")
    return cfg


def load_config(path, overrides=None):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read config ({exc.strerror})") from None
    raw = dict(raw) if isinstance(raw, dict) else raw
    if isinstance(raw, dict):
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_config(raw)


def config_hash(cfg):
    payload = {k: v for k, v in sorted(cfg.items()) if k not in UNHASHED}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def synth_config(cfg):
    return SynthConfig(
        n_clients=cfg["n_clients"],
        identities_per_client=cfg["identities_per_client"],
        samples_per_identity=cfg["samples_per_identity"],
        image_size=cfg["image_size"],
        gratings=(cfg["gratings_min"], cfg["gratings_max"]),
        jitter_px=float(cfg["jitter_px"]),
        jitter_rot=float(cfg["jitter_rot"]),
        noise_sigma=float(cfg["noise_sigma"]),
        domain_strength=float(cfg["domain_strength"]),
        seed=cfg["data_seed"],
    )


def federation_config(cfg):
    return FederationConfig(
        n_clients=cfg["n_clients"],
        rounds=cfg["rounds"],
        local_epochs=cfg["local_epochs"],
        k=cfg["k"],
        lr=float(cfg["lr"]),
        batch_size=cfg["batch_size"],
        tau=float(cfg["tau"]),
        weights=LossWeights(float(cfg["w_ce"]), float(cfg["w_con"])),
        seed=cfg["seed"],
        teim_from_start=cfg["teim_from_start"],
        expert=ExpertConfig(cfg["n_filters"], cfg["kernel_size"], cfg["stride"], cfg["pool"]),
        hidden=cfg["hidden"],
        template_dim=cfg["template_dim"],
        augment_shift=cfg["augment_shift"],
        augment_noise=float(cfg["augment_noise"]),
        workers=cfg["workers"],
    )


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg, out=None):
    root = out or cfg["data_dir"]
    dataset = generate_synthetic(synth_config(cfg))
    split = make_benchmark_split(dataset, cfg["n_clients"], cfg["data_seed"])
    write_image_directory(os.path.join(root, "images"), dataset)
    write_manifest(os.path.join(root, "manifest.json"), split.to_manifest(dataset))
    return root


def load_benchmark(data_dir):
    dataset = load_image_directory(os.path.join(data_dir, "images"))
    split = split_from_manifest(dataset, read_manifest(os.path.join(data_dir, "manifest.json")))
    return dataset, split


# ---------------------------------------------------------------------------
# train


def _checkpoint_models(result):
    if result.method == "fedpalm":
        models = {f"closed_{c.client_id}": c.closed for c in result.clients}
        models["open"] = result.global_model
        return models
    if result.method == "fedavg":
        return {"global": result.global_model}
    return {f"local_{c.client_id}": c.closed for c in result.clients}


def _phase_rows(result):
    phases = {}
    for rec in result.log:
        phases.setdefault(rec.round, set()).add(rec.phase)
    rows = []
    for r in sorted(phases):
        (phase,) = phases[r]
        rows.append((r, phase, int(phase == 2), int(phase == 2)))
    return rows


def train_run(cfg, run_dir, dataset, split):
    """Train ``cfg['method']`` and write round log, checkpoints and metadata."""
    fcfg = federation_config(cfg)
    digest = config_hash(cfg)
    start = time.perf_counter()
    result = run_federation(fcfg, dataset, split, cfg["method"])
    wall = time.perf_counter() - start
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    write_round_log(os.path.join(run_dir, "round_log.csv"), result.log)
    with open(os.path.join(run_dir, "round_phases.csv"), "w") as fh:
        fh.write("round,phase,teim_active,closed_frozen\n")
        for row in _phase_rows(result):
            fh.write(",".join(str(v) for v in row) + "\n")
    for name, model in _checkpoint_models(result).items():
        save_model(os.path.join(ckpt_dir, f"{name}.ckpt"), model, {"config_hash": digest, "name": name})
    if result.boundary_models:
        bdir = os.path.join(ckpt_dir, "phase_boundary")
        os.makedirs(bdir, exist_ok=True)
        for name, model in result.boundary_models.items():
            save_model(os.path.join(bdir, f"{name}.ckpt"), model, {"config_hash": digest, "name": name})
    _write_json(
        os.path.join(run_dir, "run.json"),
        {
            "config": cfg,
            "config_hash": digest,
            "method": cfg["method"],
            "seed": cfg["seed"],
            "phase_boundary": fcfg.phase_boundary if cfg["method"] == "fedpalm" else None,
            "wall_time_s": wall,
        },
    )
    return result


def cmd_train(cfg, run_dir=None):
    run_dir = run_dir or cfg["out"]
    dataset, split = load_benchmark(cfg["data_dir"])
    os.makedirs(run_dir, exist_ok=True)
    return train_run(cfg, run_dir, dataset, split)


# ---------------------------------------------------------------------------
# eval


def restore_result(run_dir):
    """Rebuild a FederationResult from the checkpoints of a finished run."""
    with open(os.path.join(run_dir, "run.json")) as fh:
        meta = json.load(fh)
    cfg = validate_config(meta["config"])
    if config_hash(cfg) != meta["config_hash"]:
        raise ConfigurationError("run.json config does not match its recorded hash")
    fcfg = federation_config(cfg)
    method = cfg["method"]
    models = {}
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(ckpt_dir):
        raise PalmFLError(f"{ckpt_dir}: no checkpoints found")
    for fname in sorted(os.listdir(ckpt_dir)):
        if fname.endswith(".ckpt"):
            model, ck_meta = load_model(os.path.join(ckpt_dir, fname))
            if ck_meta.get("config_hash") != meta["config_hash"]:
                raise ConfigurationError(f"{fname}: checkpoint hash differs from run config hash")
            models[fname[: -len(".ckpt")]] = model
    n = fcfg.n_clients
    empty = np.zeros((0,) + (cfg["image_size"],) * 2)
    clients = [ClientState(c, empty, np.zeros(0, dtype=np.int64)) for c in range(n)]
    global_model = None
    try:
        if method == "fedpalm":
            global_model = models["open"]
            closed_experts = {c: models[f"closed_{c}"].expert for c in range(n)}
            for c in clients:
                c.closed = models[f"closed_{c.client_id}"]
                c.open = global_model.copy()
                c.received_experts = {k: v.copy() for k, v in closed_experts.items()}
        elif method == "fedavg":
            global_model = models["global"]
            for c in clients:
                c.open = global_model.copy()
        else:
            for c in clients:
                c.closed = models[f"local_{c.client_id}"]
    except KeyError as exc:
        raise PalmFLError(f"{run_dir}: missing checkpoint {exc.args[0]}.ckpt") from None
    n_classes = global_model.embedding["Wc"].shape[0] if global_model else clients[0].closed.embedding["Wc"].shape[0]
    result = FederationResult(method, fcfg, clients, global_model, [], [], n_classes, [])
    return result, cfg, meta["config_hash"]


def eval_run(run_dir, out_dir=None, dataset=None, split=None):
    out_dir = out_dir or run_dir
    result, cfg, digest = restore_result(run_dir)
    if dataset is None:
        dataset, split = load_benchmark(cfg["data_dir"])
    report, rocs = evaluate(result, dataset, split, digest)
    os.makedirs(os.path.join(out_dir, "roc"), exist_ok=True)
    with open(os.path.join(out_dir, "eval_report.json"), "w") as fh:
        fh.write(report.to_json())
    for view, roc in rocs.items():
        write_roc_csv(os.path.join(out_dir, "roc", f"{cfg['method']}_{view}.csv"), roc)
    return report


# ---------------------------------------------------------------------------
# ablate-k


def ablate_k(cfg, k_list, out_dir, teim_from_start=False):
    """Open-set EER/ACC/AUC for FedAvg, FedPalm-K variants and (optionally) FedPalm*."""
    dataset, split = load_benchmark(cfg["data_dir"])
    seeds = cfg["seeds"] or [cfg["seed"]]
    variants = [("baseline", {"method": "fedavg"})]
    if teim_from_start:
        variants.append(("teim_from_start", {"method": "fedpalm", "teim_from_start": True}))
    for k in k_list:
        variants.append((f"K={k}", {"method": "fedpalm", "k": k, "teim_from_start": False}))
    rows = []
    for name, overrides in variants:
        metrics = []
        for seed in seeds:
            vcfg = validate_config({**cfg, **overrides, "seed": seed})
            run_dir = os.path.join(out_dir, name.replace("=", ""), f"seed-{seed}")
            os.makedirs(run_dir, exist_ok=True)
            train_run(vcfg, run_dir, dataset, split)
            report = eval_run(run_dir, dataset=dataset, split=split)
            metrics.append(report.open["global"])
        rows.append(
            {
                "variant": name,
                "method": overrides["method"],
                "k": overrides.get("k", cfg["k"]) if overrides["method"] == "fedpalm" else None,
                "teim_from_start": overrides.get("teim_from_start", False),
                "phase_boundary": 0 if overrides.get("teim_from_start") else federation_config(cfg).phase_boundary,
                "seeds": list(seeds),
                "eer": float(np.mean([m["eer"] for m in metrics])),
                "acc": float(np.mean([m["acc"] for m in metrics])),
                "auc": float(np.mean([m["auc"] for m in metrics])),
            }
        )
    table = {"scenario": "open", "rows": rows, "reference": ABLATION_REFERENCE}
    _write_json(os.path.join(out_dir, "ablation.json"), table)
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write("variant,eer,acc,auc\n")
        for row in rows:
            fh.write(f"{row['variant']},{row['eer']!r},{row['acc']!r},{row['auc']!r}\n")
    return table


def format_ablation(table):
    lines = [f"{'':>16} " + " ".join(f"{r['variant']:>16}" for r in table["rows"])]
    for metric in ("eer", "acc", "auc"):
        lines.append(f"{metric.upper():>16} " + " ".join(f"{r[metric]:>16.4f}" for r in table["rows"]))
    lines.append(f"reference ({table['reference']['note']}):")
    for metric in ("eer", "acc", "auc"):
        ref = table["reference"][metric]
        lines.append(f"  {metric.upper()}: " + ", ".join(f"{k} {v:.4f}" for k, v in ref.items()))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="palmfl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_method=True):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if with_method:
            p.add_argument("--method", choices=("fedpalm", "fedavg", "local"))
            p.add_argument("--k", type=int)
            p.add_argument("--teim-from-start", action="store_true", default=None)

    common(sub.add_parser("gen-data", help="write a synthetic PGM dataset and split manifest"), with_method=False)
    common(sub.add_parser("train", help="train one method and write checkpoints + round log"))
    p_eval = sub.add_parser("eval", help="evaluate a finished run directory")
    p_eval.add_argument("run_dir")
    p_eval.add_argument("--out")
    p_ab = sub.add_parser("ablate-k", help="K ablation over FedPalm variants")
    p_ab.add_argument("--config", required=True)
    p_ab.add_argument("--seed", type=int)
    p_ab.add_argument("--out")
    p_ab.add_argument("--k", type=int, action="append", help="repeatable; defaults to config k_list or 1,3,N")
    p_ab.add_argument("--teim-from-start", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            cfg = load_config(args.config, {"data_seed": args.seed})
            root = cmd_gen_data(cfg, args.out)
            print(f"wrote dataset to {root}")
        elif args.command == "train":
            overrides = {"seed": args.seed, "method": args.method, "k": args.k, "teim_from_start": args.teim_from_start}
            cfg = load_config(args.config, overrides)
            run_dir = args.out or cfg["out"]
            cmd_train(cfg, run_dir)
            print(f"trained {cfg['method']} into {run_dir}")
        elif args.command == "eval":
            report = eval_run(args.run_dir, args.out)
            closed, opened = report.closed, report.open
            for e in closed["per_client"]:
                print(f"closed client {e['client']}: EER {e['eer']:.4f} AUC {e['auc']:.4f} ACC {e['acc']:.4f}")
            print(f"closed average: EER {closed['average']['eer']:.4f}")
            view = opened["global"] or opened["average"]
            print(f"open: EER {view['eer']:.4f} AUC {view['auc']:.4f} ACC {view['acc']:.4f}")
        else:
            cfg = load_config(args.config, {"seed": args.seed})
            k_list = args.k or cfg["k_list"] or sorted(k for k in {1, 3, cfg["n_clients"]} if k <= cfg["n_clients"])
            out = args.out or cfg["out"]
            os.makedirs(out, exist_ok=True)
            print(format_ablation(ablate_k(cfg, k_list, out, args.teim_from_start)))
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PalmFLError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
