"""Command line entry point.

One subcommand per protocol. Configuration comes from built-in defaults, then an
optional --config JSON file, then flags (highest precedence). All randomness is
governed by --seed. Progress goes to stderr; machine-readable results go to
stdout or files under --out. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

from .embedding import (NetworkConfig, image_network_config, init_network,
                        layer_from_dict, load_checkpoint, save_checkpoint)
from .episodes import (ClassDataset, ImagePreprocess, SamplerConfig, SynthConfig,
                       export_csv_dataset, generate_synthetic, load_image_dataset,
                       load_vector_dataset, parse_csv_rows, preprocess)
from .errors import FsdError, IngestionError, UsageError
from .evaluate import (CrossGenConfig, build_zero_shot_registry, cross_generator_run,
                       export_embeddings, fewshot_detect, shot_sweep, zero_shot_detect)
from .optim import ScheduleConfig, TrainSinks, train
from .protonet import load_registry, save_registry
from .util import derived_int
from .embedding import vector_network_config

log = logging.getLogger("fsdetect")

DEFAULT_CONFIG = {
    "seed": 0,
    "out": None,
    "threads": 1,
    "dataset": {
        "kind": None,              # synth | image | vector; auto-detected from path if null
        "path": None,
        "real_name": "real",
        "train_fraction": 0.8,
        "resize": 256,
        "crop": 224,
        "synth": {
            "num_fake_classes": 6,
            "dimension": 16,
            "center_separation": 8.0,
            "within_class_noise": 1.0,
            "samples_per_class": 400,
            "multimodal_classes": [],
            "seed": None,          # null: derived from the global seed
        },
    },
    "network": {
        "embedding_dim": 64,
        "hidden": [64, 64],
        "layers": None,            # explicit layer descriptors override the defaults
        "seed": None,
    },
    "sampler": {"n_classes": 3, "n_support": 5, "n_query": 5},
    "schedule": {
        "base_lr": 1e-4,
        "gamma": 0.5,
        "step_size": 80000,
        "total_steps": 200000,
        "episodes_per_step": 16,
        "checkpoint_every": 1000,
        "log_every": 100,
    },
    "eval": {
        "shots": 10,
        "repeats": 20,
        "query_cap": 200,
        "shots_list": [1, 3, 5, 10, 25, 50, 100, 200],
        "samples_per_class": 1024,
        "export_cap": 1024,
    },
}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        cfg = _deep_merge(cfg, user)
    return cfg


def _apply(cfg: dict, path: str, value):
    if value is None:
        return
    node = cfg
    keys = path.split(".")
    for k in keys[:-1]:
        node = node[k]
    node[keys[-1]] = value


def _merged_config(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    _apply(cfg, "seed", getattr(args, "seed", None))
    _apply(cfg, "out", getattr(args, "out", None))
    _apply(cfg, "threads", getattr(args, "threads", None))
    for flag, path in getattr(args, "_overrides", []):
        _apply(cfg, path, getattr(args, flag, None))
    if cfg["threads"] != 1:
        log.info("--threads %s requested; execution is sequential and deterministic",
                 cfg["threads"])
    return cfg


def _detect_kind(path) -> str:
    p = Path(path)
    if not p.is_dir():
        raise IngestionError(f"dataset path {p} is not a directory")
    if any(p.glob("*.csv")):
        return "vector"
    if any(child.is_dir() for child in p.iterdir()):
        return "image"
    raise IngestionError(f"cannot tell whether {p} holds CSV classes or image folders")


def _synth_config(cfg: dict) -> SynthConfig:
    s = cfg["dataset"]["synth"]
    seed = s["seed"] if s["seed"] is not None else derived_int(cfg["seed"], "synth")
    return SynthConfig(
        num_fake_classes=s["num_fake_classes"], dimension=s["dimension"],
        center_separation=s["center_separation"], within_class_noise=s["within_class_noise"],
        samples_per_class=s["samples_per_class"],
        multimodal_classes=tuple(s["multimodal_classes"]), seed=seed,
        train_fraction=cfg["dataset"]["train_fraction"])


def _load_dataset(cfg: dict, require_real: bool = True) -> ClassDataset:
    d = cfg["dataset"]
    kind = d["kind"]
    if kind is None:
        if d["path"] is None:
            raise UsageError("no dataset: pass --data PATH or set dataset.kind in the config")
        kind = _detect_kind(d["path"])
    if kind == "synth":
        return generate_synthetic(_synth_config(cfg))
    if d["path"] is None:
        raise UsageError(f"dataset.kind={kind!r} needs a path")
    if kind == "vector":
        return load_vector_dataset(d["path"], d["real_name"], d["train_fraction"],
                                   require_real=require_real)
    if kind == "image":
        return load_image_dataset(d["path"], d["real_name"], d["train_fraction"],
                                  ImagePreprocess(d["resize"], d["crop"]),
                                  require_real=require_real)
    raise UsageError(f"unknown dataset kind {kind!r}")


def _network_config(cfg: dict, input_shape) -> NetworkConfig:
    n = cfg["network"]
    seed = n["seed"] if n["seed"] is not None else derived_int(cfg["seed"], "init")
    if n["layers"]:
        specs = tuple(layer_from_dict(d) for d in n["layers"])
        return NetworkConfig(tuple(input_shape), specs, n["embedding_dim"], seed)
    if len(input_shape) == 1:
        return vector_network_config(input_shape[0], n["embedding_dim"],
                                     tuple(n["hidden"]), seed)
    return image_network_config(tuple(input_shape), n["embedding_dim"], seed)


def _sampler_config(cfg: dict, split: str = "train") -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(n_classes=s["n_classes"], n_support=s["n_support"],
                         n_query=s["n_query"], seed=derived_int(cfg["seed"], "sampler"),
                         split=split)


def _schedule_config(cfg: dict) -> ScheduleConfig:
    s = cfg["schedule"]
    return ScheduleConfig(base_lr=s["base_lr"], gamma=s["gamma"], step_size=s["step_size"],
                          total_steps=s["total_steps"],
                          episodes_per_step=s["episodes_per_step"])


def _out_dir(cfg: dict, required: bool = True):
    out = cfg["out"]
    if out is None:
        if required:
            raise UsageError("this command needs --out DIR")
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _load_query_samples(path, image_cfg):
    """A directory of images, or a CSV file of one vector per row."""
    p = Path(path)
    if p.is_file() and p.suffix.lower() == ".csv":
        rows = parse_csv_rows(p)
        ids = [f"{p.stem}:{i}" for i in range(len(rows))]
        return [preprocess(r, "eval") for r in rows], ids
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if files:
            return [preprocess(f, "eval", image_cfg=image_cfg) for f in files], \
                   [f.name for f in files]
        csvs = sorted(p.glob("*.csv"))
        if csvs:
            samples, ids = [], []
            for f in csvs:
                rows = parse_csv_rows(f)
                samples += [preprocess(r, "eval") for r in rows]
                ids += [f"{f.stem}:{i}" for i in range(len(rows))]
            return samples, ids
        raise IngestionError(f"{p}: no images or CSV files")
    raise IngestionError(f"{p}: expected a directory or a .csv file")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = _merged_config(args)
    out = _out_dir(cfg)
    ds = generate_synthetic(_synth_config(cfg))
    export_csv_dataset(ds, out)
    _emit({"out": str(out), "classes": [c.name for c in ds.classes],
           "samples_per_class": len(ds.classes[0].samples),
           "dimension": ds.input_shape[0]})
    return 0


def cmd_train(args) -> int:
    cfg = _merged_config(args)
    out = _out_dir(cfg)
    ds = _load_dataset(cfg)
    if args.exclude:
        ds = ds.without_class(ds.class_by_name(args.exclude).class_id)
    net = init_network(_network_config(cfg, ds.input_shape))
    schedule = _schedule_config(cfg)
    sinks = TrainSinks(log_path=out / "train_log.jsonl",
                       checkpoint_dir=out / "checkpoints",
                       checkpoint_every=cfg["schedule"]["checkpoint_every"],
                       log_every=cfg["schedule"]["log_every"])
    result = train(net, ds, _sampler_config(cfg), schedule, sinks)
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(result.network, ckpt)
    _emit({"steps": schedule.total_steps,
           "final_loss": float(result.losses[-1]) if len(result.losses) else None,
           "checkpoint": str(ckpt), "train_log": str(sinks.log_path),
           "excluded_class": args.exclude})
    return 0


def cmd_eval(args) -> int:
    cfg = _merged_config(args)
    out = _out_dir(cfg, required=False)
    ds = _load_dataset(cfg)
    run_cfg = CrossGenConfig(
        dataset=ds, network=_network_config(cfg, ds.input_shape),
        sampler=_sampler_config(cfg), schedule=_schedule_config(cfg),
        shots=cfg["eval"]["shots"], query_cap=cfg["eval"]["query_cap"], seed=cfg["seed"])
    result = cross_generator_run(run_cfg)
    table = result.render_text()
    log.info("cross-generator matrix (acc %% / ap %%):\n%s", table)
    if out is not None:
        (out / "crossgen.txt").write_text(table + "\n", encoding="utf-8")
        (out / "crossgen.json").write_text(
            json.dumps(result.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    _emit(result.to_dict())
    return 0


def cmd_detect(args) -> int:
    cfg = _merged_config(args)
    net = load_checkpoint(args.ckpt)
    image_cfg = ImagePreprocess(cfg["dataset"]["resize"], cfg["dataset"]["crop"])
    sup_fake, _ = _load_query_samples(args.support_fake, image_cfg)
    sup_real, _ = _load_query_samples(args.support_real, image_cfg)
    if args.shots:
        sup_fake = sup_fake[: args.shots]
        sup_real = sup_real[: args.shots]
    queries, ids = _load_query_samples(args.query, image_cfg)
    for v in fewshot_detect(net, sup_fake, sup_real, queries, ids=ids):
        _emit(vars(v))
    return 0


def cmd_build_protos(args) -> int:
    cfg = _merged_config(args)
    net = load_checkpoint(args.ckpt)
    ds = _load_dataset(cfg)
    registry = build_zero_shot_registry(net, ds, cfg["eval"]["samples_per_class"],
                                        seed=cfg["seed"])
    if args.registry:
        reg_path = Path(args.registry)
    else:
        reg_path = _out_dir(cfg) / "registry.json"
    save_registry(registry, reg_path)
    _emit({"registry": str(reg_path), "prototypes": len(registry),
           "embedding_dim": registry.embedding_dim, "checkpoint_id": registry.checkpoint_id})
    return 0


def cmd_zero_shot(args) -> int:
    cfg = _merged_config(args)
    net = load_checkpoint(args.ckpt)
    registry = load_registry(args.registry)
    if registry.checkpoint_id and registry.checkpoint_id != net.checkpoint_id():
        log.warning("registry %s was built from a different checkpoint", args.registry)
    image_cfg = ImagePreprocess(cfg["dataset"]["resize"], cfg["dataset"]["crop"])
    queries, ids = _load_query_samples(args.query, image_cfg)
    for v in zero_shot_detect(net, registry, queries, ids=ids):
        _emit(vars(v))
    return 0


def cmd_ablate(args) -> int:
    cfg = _merged_config(args)
    out = _out_dir(cfg, required=False)
    net = load_checkpoint(args.ckpt)
    ds = _load_dataset(cfg)
    held_out = ds.class_by_name(args.exclude).class_id
    shots_list = cfg["eval"]["shots_list"]
    result = shot_sweep(net, ds, held_out, shots_list=shots_list,
                        repeats=cfg["eval"]["repeats"], seed=cfg["seed"])
    table = result.render_text()
    log.info("shot sweep on %s:\n%s", args.exclude, table)
    if out is not None:
        (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
        (out / "ablation.json").write_text(
            json.dumps(result.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    _emit(result.to_dict())
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = _merged_config(args)
    net = load_checkpoint(args.ckpt)
    ds = _load_dataset(cfg)
    out_path = Path(args.embeddings) if args.embeddings else _out_dir(cfg) / "embeddings.csv"
    export_embeddings(net, ds, out_path, per_class_cap=cfg["eval"]["export_cap"],
                      seed=cfg["seed"], split=args.split)
    _emit({"embeddings": str(out_path), "split": args.split})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker count (1 = deterministic mode)")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


def build_parser() -> _Parser:
    parser = _Parser(prog="fsdetect",
                     description="Few-shot metric-learning detector for generated content")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic vector dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, dest="classes")
    p.add_argument("--dim", type=int, dest="dim")
    p.add_argument("--separation", type=float, dest="separation")
    p.add_argument("--noise", type=float, dest="noise")
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.add_argument("--multimodal", type=_int_list, dest="multimodal",
                   help="comma-separated fake class ids that get two sub-centers")
    p.set_defaults(func=cmd_synth_data, _overrides=[
        ("classes", "dataset.synth.num_fake_classes"),
        ("dim", "dataset.synth.dimension"),
        ("separation", "dataset.synth.center_separation"),
        ("noise", "dataset.synth.within_class_noise"),
        ("samples_per_class", "dataset.synth.samples_per_class"),
        ("multimodal", "dataset.synth.multimodal_classes"),
    ])

    p = sub.add_parser("train", help="episodic training run")
    _add_common(p)
    p.add_argument("--data", dest="data")
    p.add_argument("--steps", type=int, dest="steps")
    p.add_argument("--lr", type=float, dest="lr")
    p.add_argument("--episodes-per-step", type=int, dest="episodes_per_step")
    p.add_argument("--exclude", help="class name to leave out of training")
    p.set_defaults(func=cmd_train, _overrides=[
        ("data", "dataset.path"),
        ("steps", "schedule.total_steps"),
        ("lr", "schedule.base_lr"),
        ("episodes_per_step", "schedule.episodes_per_step"),
    ])

    p = sub.add_parser("eval", help="leave-one-class-out cross-generator matrix")
    _add_common(p)
    p.add_argument("--data", dest="data")
    p.add_argument("--steps", type=int, dest="steps")
    p.add_argument("--shots", type=int, dest="shots")
    p.add_argument("--query-cap", type=int, dest="query_cap")
    p.set_defaults(func=cmd_eval, _overrides=[
        ("data", "dataset.path"),
        ("steps", "schedule.total_steps"),
        ("shots", "eval.shots"),
        ("query_cap", "eval.query_cap"),
    ])

    p = sub.add_parser("detect", help="few-shot detection from support directories")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--support-fake", required=True, dest="support_fake")
    p.add_argument("--support-real", required=True, dest="support_real")
    p.add_argument("--query", required=True)
    p.add_argument("--shots", type=int, help="use only the first K supports per side")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("build-protos", help="build a zero-shot prototype registry")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", dest="data")
    p.add_argument("--registry", help="output registry path (default: OUT/registry.json)")
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.set_defaults(func=cmd_build_protos, _overrides=[
        ("data", "dataset.path"),
        ("samples_per_class", "eval.samples_per_class"),
    ])

    p = sub.add_parser("zero-shot", help="classify queries against a registry")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--query", required=True)
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("ablate", help="shot-count sweep against one held-out class")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", dest="data")
    p.add_argument("--exclude", required=True, help="held-out class name")
    p.add_argument("--shots-list", type=_int_list, dest="shots_list")
    p.add_argument("--repeats", type=int, dest="repeats")
    p.set_defaults(func=cmd_ablate, _overrides=[
        ("data", "dataset.path"),
        ("shots_list", "eval.shots_list"),
        ("repeats", "eval.repeats"),
    ])

    p = sub.add_parser("export-embeddings", help="dump embeddings to CSV for projection")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", dest="data")
    p.add_argument("--cap", type=int, dest="cap")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--embeddings", help="output CSV path (default: OUT/embeddings.csv)")
    p.set_defaults(func=cmd_export_embeddings, _overrides=[
        ("data", "dataset.path"),
        ("cap", "eval.export_cap"),
    ])
    return parser


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("FSD_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{parser.prog}: error: {exc}\n")
        sys.stderr.write(parser.format_usage())
        return 1
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{parser.prog}: error: {exc}\n")
        return 1
    except FsdError as exc:
        sys.stderr.write(f"{parser.prog}: {type(exc).__name__}: {exc}\n")
        return 2
    except BrokenPipeError:
        # downstream reader (head, less, ...) closed stdout; not our failure
        sys.stdout = open(os.devnull, "w")
        return 0
    except OSError as exc:
        sys.stderr.write(f"{parser.prog}: i/o error: {exc}\n")
        return 2


def main() -> None:
    sys.exit(run())
