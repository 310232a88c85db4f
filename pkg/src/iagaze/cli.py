"""Command-line entry points ``ia`` and ``hoi``.

Exit codes: 0 success, 1 validation error (bad flags, bad inputs), 2 runtime
failure. Every run writes ``run.json`` metadata into ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IAError

log = logging.getLogger("iagaze")

COMMANDS = ("convert-fixations", "split", "train", "predict", "evaluate", "ablate",
            "pseudo-label", "train-toy", "plot")
HOI_COMMANDS = ("pseudo-label", "train-toy")


class UsageError(IAError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config and metadata
# --------------------------------------------------------------------------

def load_config(path) -> dict:
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return cfg


def effective_config(args) -> dict:
    """Merge built-in defaults < config file < command-line flags."""
    from .model import IAConfig
    from .training import TrainConfig

    file_cfg = load_config(args.config)
    model = {f.name: f.default for f in fields(IAConfig) if f.name != "ablate"}
    model["ablate"] = []
    model.update(file_cfg.get("model", {}))
    train = TrainConfig().to_dict()
    train.update(file_cfg.get("train", {}))
    enc = {"backend": "mock", "seed": 0}
    enc.update(file_cfg.get("encoder", {}))
    data = {"sigma": None, "category_key": "interaction_pair", "test_fraction": 0.2}
    data.update(file_cfg.get("data", {}))

    for key in ("epochs", "batch_size", "lr", "lr_decay_every", "lr_decay_factor", "weight_decay", "dtype"):
        v = getattr(args, key, None)
        if v is not None:
            train[key] = v
    for key in ("patch_size", "image_size", "model_width", "n_heads", "fourier_bands"):
        v = getattr(args, key, None)
        if v is not None:
            model[key] = v
    if args.seed is not None:
        train["seed"] = args.seed
    if args.encoder is not None:
        enc["backend"] = args.encoder
    if getattr(args, "encoder_seed", None) is not None:
        enc["seed"] = args.encoder_seed
    for key in ("sigma", "category_key", "test_fraction"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    return {"model": model, "train": train, "encoder": enc, "data": data}


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    tmp.replace(path)


class Run:
    """Collects run metadata and writes it atomically on exit."""

    def __init__(self, argv, args):
        self.meta = {"command": ["ia", *argv], "version": __version__, "started": _now(),
                     "git": git_describe(), "artifacts": [], "status": "running"}
        self.out = Path(args.out) if getattr(args, "out", None) else None

    def config(self, cfg: dict) -> None:
        blob = json.dumps(cfg, sort_keys=True, default=str).encode()
        self.meta.update(config=cfg, config_hash=hashlib.sha256(blob).hexdigest(),
                         seed=cfg.get("train", {}).get("seed"), encoder=cfg.get("encoder"))

    def artifact(self, path) -> Path:
        self.meta["artifacts"].append(str(path))
        return Path(path)

    def finish(self, status: str, error: str | None = None) -> None:
        if self.out is None:
            return
        self.meta.update(status=status, finished=_now())
        if error:
            self.meta["error"] = error
        self.out.mkdir(parents=True, exist_ok=True)
        write_json(self.out / "run.json", self.meta)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _records(args, require_fixations=False):
    from .data import load_dataset

    if not args.manifest:
        raise UsageError("--manifest is required")
    return load_dataset(args.manifest, require_fixations=require_fixations), Path(args.manifest).parent


def _backend(cfg):
    from .encoders import make_backend

    enc, model = cfg["encoder"], cfg["model"]
    if enc["backend"] == "mock":
        return make_backend("mock", seed=int(enc["seed"]), image_size=model["image_size"],
                            patch_size=model["patch_size"], text_dim=model["text_dim"],
                            visual_dim=model["visual_dim"])
    backend = make_backend(enc["backend"], image_size=model["image_size"])
    model.update(text_dim=backend.text_dim, visual_dim=backend.visual_dim, patch_size=backend.patch_size)
    return backend


def _split(path):
    from .data import SplitManifest

    return SplitManifest.load(path) if path else None


def _select(records, ids):
    keep = set(ids)
    return [r for r in records if r[0].sample_id in keep]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_convert_fixations(args, run):
    from .data import fixations_to_heatmap, map_to_png, write_heatmap

    records, _ = _records(args)
    cfg = effective_config(args)
    run.config(cfg)
    out = Path(args.out)
    sigma = cfg["data"]["sigma"]
    for sample, fix in records:
        groups = [("", fix)]
        if args.per_observer:
            groups += [(f".{o}", fix.for_observer(o)) for o in fix.observers()]
        for suffix, f in groups:
            m = fixations_to_heatmap(f, sample.width, sample.height, sigma)
            write_heatmap(m, run.artifact(out / f"{sample.sample_id}{suffix}.ighm"))
            map_to_png(m, run.artifact(out / f"{sample.sample_id}{suffix}.png"))
    print(f"wrote {len(records)} heatmaps to {out}")


def cmd_split(args, run):
    from .data import make_zeroshot_split

    records, _ = _records(args)
    cfg = effective_config(args)
    run.config(cfg)
    split = make_zeroshot_split([s for s, _ in records], cfg["data"]["category_key"],
                                seed=cfg["train"]["seed"], test_fraction=cfg["data"]["test_fraction"])
    split.save(run.artifact(Path(args.out) / "split.json"))
    print(f"train {len(split.train_ids)} / test {len(split.test_ids)} samples")


def _train_setup(args, run):
    from .model import IAConfig
    from .training import TrainConfig, check_compatible, prepare

    records, root = _records(args)
    cfg = effective_config(args)
    if getattr(args, "ablate_modules", None):
        cfg["model"]["ablate"] = args.ablate_modules
    backend = _backend(cfg)
    run.config(cfg)
    split = _split(args.split)
    train_records = _select(records, split.train_ids) if split else records
    model_cfg = IAConfig(**cfg["model"])
    train_cfg = TrainConfig(**cfg["train"])
    check_compatible(backend, model_cfg)
    items = prepare(train_records, backend, root, cfg["data"]["sigma"])
    return records, root, cfg, backend, split, model_cfg, train_cfg, items


def cmd_train(args, run):
    from .checkpoint import save_checkpoint
    from .plotting import plot_loss
    from .training import Trainer, build_model

    records, root, cfg, backend, split, model_cfg, train_cfg, items = _train_setup(args, run)
    model = build_model(model_cfg, seed=train_cfg.seed, dtype=train_cfg.torch_dtype)
    trainer = Trainer(items, model, train_cfg)
    trainer.fit()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"train_ids": [it.enc.sample_id for it in items], "train": train_cfg.to_dict(),
            "encoder": backend.describe(), "init": "zero residual outputs and ICB gate; fan-in default elsewhere",
            "epochs_done": trainer.epoch}
    save_checkpoint(run.artifact(out / "checkpoint.iack"), model, meta, trainer.optimizer)
    with run.artifact(out / "loss.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "mean_loss"])
        w.writeheader()
        w.writerows(trainer.log)
    plot_loss(trainer.log, run.artifact(out / "loss.png"))
    run.meta["encoder_description"] = backend.describe()
    print(f"final loss {trainer.log[-1]['mean_loss']:.6f} after {trainer.epoch} epochs")


def _checkpoint_backend(args, cfg, path):
    from .checkpoint import read_header
    from .encoders import make_backend

    header = read_header(path)
    enc = header["meta"].get("encoder", {})
    name = args.encoder or enc.get("backend", cfg["encoder"]["backend"])
    m = header["config"]
    if name == "mock":
        seed = args.encoder_seed if args.encoder_seed is not None else enc.get("seed", cfg["encoder"]["seed"])
        return make_backend("mock", seed=int(seed), image_size=m["image_size"], patch_size=m["patch_size"],
                            text_dim=m["text_dim"], visual_dim=m["visual_dim"])
    return make_backend(name, image_size=m["image_size"])


def _predict_maps(args, cfg, records, root):
    from .checkpoint import load_checkpoint
    from .data import load_image
    from .model import ia_forward

    backend = _checkpoint_backend(args, cfg, args.checkpoint)
    model, _, _ = load_checkpoint(args.checkpoint)
    return {s.sample_id: ia_forward(s, load_image(s, root), backend, model) for s, _ in records}


def cmd_predict(args, run):
    from .data import map_to_png, write_heatmap

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    records, root = _records(args)
    cfg = effective_config(args)
    run.config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, m in _predict_maps(args, cfg, records, root).items():
        write_heatmap(m, run.artifact(out / f"{sid}.ighm"))
        map_to_png(m, run.artifact(out / f"{sid}.png"))
    print(f"wrote {len(records)} predictions to {out}")


def _read_pred_dir(path, ids):
    from .data import read_heatmap

    preds = {}
    for sid in ids:
        f = Path(path) / f"{sid}.ighm"
        if f.exists():
            preds[sid] = read_heatmap(f)
    return preds


def cmd_evaluate(args, run):
    from .encoders import clip_similarity_map, make_backend
    from .data import load_image
    from .metrics import AUC_VARIANT, REFERENCE_FULL_SCALE, evaluate, write_report
    from .plotting import plot_metric_hist

    records, root = _records(args)
    cfg = effective_config(args)
    run.config(cfg)
    split = _split(args.split)
    scored = _select(records, split.test_ids) if split else records
    sources = [bool(args.pred), bool(args.checkpoint), bool(args.baseline)]
    if sum(sources) != 1:
        raise UsageError("give exactly one of --pred, --checkpoint, --baseline")
    if args.pred:
        preds = _read_pred_dir(args.pred, [s.sample_id for s, _ in scored])
    elif args.checkpoint:
        preds = _predict_maps(args, cfg, scored, root)
    else:
        backend = _backend(cfg)
        preds = {s.sample_id: clip_similarity_map(backend, load_image(s, root), _prompt(s))
                 for s, _ in scored}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, rows = evaluate(scored, preds, sigma=cfg["data"]["sigma"], jobs=args.jobs,
                            csv_path=run.artifact(out / "per_sample.csv"))
    report.meta.update(auc_variant=AUC_VARIANT, split=args.split, n_total=len(records))
    if args.full_scale:
        # informational only: desk-scale runs are not expected to approach these
        report.meta["reference_full_scale"] = dict(REFERENCE_FULL_SCALE)
    write_report(report, run.artifact(out / "report.json"))
    plot_metric_hist(rows, run.artifact(out / "metrics.png"))
    print(json.dumps({k: getattr(report, k) for k in ("cc", "kldiv", "sim", "auc", "n_samples")}))


def _prompt(sample):
    from .encoders import build_prompts

    return build_prompts(sample.object_label, sample.interaction_label)[2]


def cmd_ablate(args, run):
    from dataclasses import replace

    from .plotting import plot_ablation
    from .training import VARIANTS, ablate, prepare

    records, root, cfg, backend, split, model_cfg, train_cfg, items = _train_setup(args, run)
    eval_records = _select(records, split.test_ids) if split else records
    eval_items = prepare(eval_records, backend, root, cfg["data"]["sigma"])
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    rows = ablate(items, eval_records, eval_items, replace(model_cfg, ablate=[]), train_cfg, variants,
                  sigma=cfg["data"]["sigma"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = ["variant", "cc", "kldiv", "sim", "auc", "final_loss", "n_params"]
    with run.artifact(out / "ablation.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows([{k: r[k] for k in keys} for r in rows])
    write_json(run.artifact(out / "ablation.json"), rows)
    plot_ablation(rows, run.artifact(out / "ablation.png"))
    for r in rows:
        print(f"{r['variant']:>9}  cc={r['cc']:.4f} kldiv={r['kldiv']:.4f} sim={r['sim']:.4f} auc={r['auc']:.4f}")


def cmd_pseudo_label(args, run):
    from .hoi import pseudo_label

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    records, root = _records(args)
    cfg = effective_config(args)
    run.config(cfg)
    backend = _checkpoint_backend(args, cfg, args.checkpoint)
    labels = pseudo_label(args.checkpoint, records, backend, root, out_dir=args.out)
    for sid in labels:
        run.artifact(Path(args.out) / f"{sid}.ighm")
    print(f"wrote {len(labels)} pseudo labels to {args.out}")


def cmd_train_toy(args, run):
    from .data import read_heatmap
    from .hoi import AlignmentConfig, make_toy_data, train_toy_hoi
    from .plotting import plot_attention_grid

    cfg = effective_config(args)
    seed = cfg["train"]["seed"]
    run.config(cfg)
    train = make_toy_data(args.n_train, seed=args.data_seed, prefix="toy")
    test = make_toy_data(args.n_test, seed=args.data_seed + 1, prefix="toytest")
    targets = None
    if args.align == "none":
        align = None
    else:
        align = AlignmentConfig(args.lambda1, args.lambda2, "human" if args.align == "human" else "ia_pseudo")
    if args.align == "ia":
        if not args.pseudo:
            raise UsageError("--align ia needs --pseudo DIR of <sample_id>.ighm maps")
        targets = {sid: read_heatmap(Path(args.pseudo) / f"{sid}.ighm") for sid in train.ids
                   if (Path(args.pseudo) / f"{sid}.ighm").exists()}
    elif args.align == "human" and args.coverage < 1.0:
        rng = np.random.default_rng(seed)
        keep = rng.random(len(train.ids)) < args.coverage
        targets = {sid: train.masks[i] for i, sid in enumerate(train.ids) if keep[i]}
    res = train_toy_hoi(train, test, align, seed=seed, epochs=args.epochs, lr=args.lr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"align": args.align, "lambda1": args.lambda1, "lambda2": args.lambda2, "seed": seed,
               "accuracy": res.accuracy, "in_mask_fraction": res.in_mask_fraction,
               "n_aligned_targets": None if targets is None else len(targets), "loss_log": res.loss_log}
    write_json(run.artifact(out / "accuracy.json"), summary)
    k = min(8, len(test.ids))
    plot_attention_grid(test.images[:k], res.attention_maps[:k], run.artifact(out / "attention.png"))
    print(f"accuracy {res.accuracy:.4f}  in-cue attention {res.in_mask_fraction:.4f}")


def cmd_plot(args, run):
    from .data import load_image, read_heatmap
    from .plotting import plot_maps

    records, root = _records(args)
    cfg = effective_config(args)
    run.config(cfg)
    if not args.maps:
        raise UsageError("--maps needs at least one directory of .ighm maps")
    labels = args.labels.split(",") if args.labels else [Path(d).name for d in args.maps]
    if len(labels) != len(args.maps):
        raise UsageError("--labels must name every --maps directory")
    wanted = set(args.sample) if args.sample else None
    out = Path(args.out)
    n = 0
    for sample, _ in records:
        if wanted and sample.sample_id not in wanted:
            continue
        maps = [read_heatmap(Path(d) / f"{sample.sample_id}.ighm") for d in args.maps]
        title = _prompt(sample)
        plot_maps(load_image(sample, root), maps, labels, run.artifact(out / f"{sample.sample_id}.png"), title)
        n += 1
    print(f"wrote {n} figures to {out}")


HANDLERS = {
    "convert-fixations": cmd_convert_fixations, "split": cmd_split, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
    "pseudo-label": cmd_pseudo_label, "train-toy": cmd_train_toy, "plot": cmd_plot,
}


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _shared(p):
    p.add_argument("--manifest", help="dataset manifest (JSON lines)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="JSON config file; flags take precedence")
    p.add_argument("--jobs", type=int, default=1, help="parallel per-sample evaluation")
    p.add_argument("--encoder", choices=("mock", "pretrained-base", "pretrained-large"), default=None)
    p.add_argument("--encoder-seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p):
    p.add_argument("--split", help="split.json; training uses its train ids")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay-every", type=int)
    p.add_argument("--lr-decay-factor", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--patch-size", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--model-width", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--fourier-bands", type=int)
    p.add_argument("--sigma", type=float, help="fixation kernel width in pixels")


def build_parser(prog="ia", commands=COMMANDS) -> Parser:
    parser = Parser(prog=prog, description="Interaction-oriented attention prediction toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    def add(name, help):
        if name in commands:
            p = sub.add_parser(name, help=help)
            _shared(p)
            return p
        return None

    p = add("convert-fixations", "rasterize fixations into IGHM + PNG heatmaps")
    if p:
        p.add_argument("--sigma", type=float)
        p.add_argument("--per-observer", action="store_true", help="also write one map per observer")
    p = add("split", "make a zero-shot train/test split")
    if p:
        p.add_argument("--category-key", choices=("interaction_pair", "action_only"))
        p.add_argument("--test-fraction", type=float)
    p = add("train", "train an IA model")
    if p:
        _train_flags(p)
        p.add_argument("--ablate", dest="ablate_modules", nargs="*", choices=("PA", "VA", "HOCB", "ICB"))
    p = add("predict", "predict attention maps with a checkpoint")
    if p:
        p.add_argument("--checkpoint")
    p = add("evaluate", "score predictions with CC / KLdiv / SIM / AUC")
    if p:
        p.add_argument("--pred", help="directory of <sample_id>.ighm predictions")
        p.add_argument("--checkpoint")
        p.add_argument("--baseline", choices=("clip",), help="raw encoder similarity maps")
        p.add_argument("--full-scale", action="store_true",
                       help="attach published full-scale reference metrics to the report (no thresholds)")
        p.add_argument("--split")
        p.add_argument("--sigma", type=float)
    p = add("ablate", "train and evaluate module-ablated variants")
    if p:
        _train_flags(p)
        p.add_argument("--variants", help="comma list, e.g. 'full,w/o PA,w/o ICB'")
    p = add("pseudo-label", "generate IA pseudo labels for a host dataset")
    if p:
        p.add_argument("--checkpoint")
    p = add("train-toy", "train the toy host HOI model with attention alignment")
    if p:
        p.add_argument("--align", choices=("none", "human", "ia"), default="human")
        p.add_argument("--lambda1", type=float, default=1.0)
        p.add_argument("--lambda2", type=float, default=2.0)
        p.add_argument("--pseudo", help="directory of IA pseudo labels (for --align ia)")
        p.add_argument("--coverage", type=float, default=1.0, help="share of samples with human maps")
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--n-train", type=int, default=400)
        p.add_argument("--n-test", type=int, default=300)
        p.add_argument("--data-seed", type=int, default=100)
    p = add("plot", "side-by-side attention overlays")
    if p:
        p.add_argument("--maps", nargs="+", help="directories of .ighm maps")
        p.add_argument("--labels", help="comma-separated panel captions")
        p.add_argument("--sample", nargs="*", help="only these sample ids")
    return parser


def dispatch(argv=None, prog="ia", commands=COMMANDS) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser(prog, commands)
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    run = Run(argv, args)
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args, run)
    except (IAError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        run.finish("invalid", str(e))
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("run failed")
        run.finish("failed", f"{type(e).__name__}: {e}")
        return 2
    run.finish("ok")
    return 0


def main() -> None:
    sys.exit(dispatch())


def hoi_main() -> None:
    sys.exit(dispatch(prog="hoi", commands=HOI_COMMANDS))
