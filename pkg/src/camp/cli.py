"""Command-line entry point: synth, train, eval, ablate, gradcheck, inspect."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from camp import tensor as tz
from camp.config import (
    ABLATION_GRID,
    ConfigError,
    ModelConfig,
    SyntheticSpec,
    TrainConfig,
    desk_model_config,
    desk_train_config,
    load_config_file,
    variant_config,
)
from camp.data import (
    Checkpoint,
    DataError,
    Dataset,
    generate_synthetic,
    load_checkpoint,
    load_features,
    save_checkpoint,
    save_dataset,
)
from camp.encoders import EncodingError, encode_caption, encode_image
from camp.evaluate import evaluate_dataset, score_dataset
from camp.losses import DomainError
from camp.model import FeatureBatch, forward_diagnostics
from camp.params import CampParams, ParamError
from camp.tensor import TensorError
from camp.train import fit


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    p.add_argument("--threads", type=int, default=1, help="worker threads for scoring")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON config file with optional 'model'/'train' sections")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int, default=None, help="feature dimension")
    p.add_argument("--d-hidden", type=int, default=None, help="affinity projection dim")
    p.add_argument("--embed-dim", type=int, default=None, help="word embedding dim")
    p.add_argument("--fusion-op", choices=("add", "concat", "product"), default=None)
    p.add_argument("--no-gates", action="store_true", help="disable fusion gates")
    p.add_argument("--no-residual", action="store_true", help="disable the fusion residual")
    p.add_argument("--variant", choices=sorted(ABLATION_GRID), default=None,
                   help="named model variant (overrides other model switches)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch", type=int, default=None, help="mini-batch size")
    p.add_argument("--epochs", type=int, default=None, help="total epochs")
    p.add_argument("--lr1", type=float, default=None, help="phase-1 learning rate")
    p.add_argument("--lr2", type=float, default=None, help="phase-2 learning rate")
    p.add_argument("--margin", type=float, default=None, help="ranking-loss margin")
    p.add_argument("--loss", choices=("bce_hardest", "bce_plain", "ranking"), default=None)
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camp",
        description="Cross-modal matching model: synthetic benchmark, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--pairs", type=int, default=200, help="training pairs")
    p.add_argument("--val-pairs", type=int, default=50)
    p.add_argument("--test-pairs", type=int, default=50)
    p.add_argument("--concepts", type=int, default=20)
    p.add_argument("--regions", type=int, default=4)
    p.add_argument("--words", type=int, default=6)
    p.add_argument("--raw-dim", type=int, default=2048)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--distractor-rate", type=float, default=0.0)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--dataset", type=Path, required=True, help="directory written by synth")
    p.add_argument("--out", type=Path, required=True, help="output directory for stats")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="checkpoint path (default: <out>/checkpoint.camp)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="test", help="split name (default test)")
    p.add_argument("--folds", type=int, default=1, help="average over N gallery folds")
    p.add_argument("--out", type=Path, default=None, help="write the report JSON here")

    p = sub.add_parser("ablate", help="train and compare the model variant grid")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--grid", default="table4", choices=("table4",))
    p.add_argument("--seeds", type=int, default=1, help="average over this many seeds")
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--d-hidden", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="write the table JSON here")

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    _add_common(p)

    p = sub.add_parser("inspect", help="dump gate statistics for one image/caption pair")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--pair", type=int, nargs=2, metavar=("IMAGE", "CAPTION"), required=True)

    return parser


def _load_split(dataset_dir: Path, split: str) -> Dataset:
    return load_features(dataset_dir / f"{split}.manifest.json")


def _model_config_from_args(args, vocab_size: int, raw_dim: int) -> ModelConfig:
    cfg = desk_model_config(vocab_size=vocab_size, raw_region_dim=raw_dim)
    if args.config is not None:
        payload = load_config_file(args.config).get("model", {})
        cfg = dataclasses.replace(cfg, **payload)
    over = {}
    if args.d is not None:
        over["d"] = args.d
    if getattr(args, "d_hidden", None) is not None:
        over["d_h"] = args.d_hidden
    if getattr(args, "embed_dim", None) is not None:
        over["embed_dim"] = args.embed_dim
    if getattr(args, "fusion_op", None) is not None:
        over["fusion_op"] = args.fusion_op
    if getattr(args, "no_gates", False):
        over["use_gates"] = False
    if getattr(args, "no_residual", False):
        over["use_residual"] = False
    if over:
        cfg = dataclasses.replace(cfg, **over)
    return cfg


def _train_config_from_args(args) -> TrainConfig:
    cfg = desk_train_config(seed=args.seed)
    if args.config is not None:
        payload = load_config_file(args.config).get("train", {})
        cfg = dataclasses.replace(cfg, **payload)
    mapping = {
        "batch": "batch_size",
        "epochs": "epochs_total",
        "lr1": "lr_phase1",
        "lr2": "lr_phase2",
        "margin": "margin",
        "loss": "loss",
        "patience": "early_stop_patience",
    }
    over = {}
    for flag, fieldname in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            over[fieldname] = value
    over["seed"] = args.seed
    return dataclasses.replace(cfg, **over)


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_pairs=args.pairs,
        val_pairs=args.val_pairs,
        test_pairs=args.test_pairs,
        n_concepts=args.concepts,
        regions_per_image=args.regions,
        words_per_caption=args.words,
        raw_region_dim=args.raw_dim,
        vocab_size=args.vocab,
        noise_sigma=args.noise,
        distractor_rate=args.distractor_rate,
        seed=args.seed,
    )
    train, val, test = generate_synthetic(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    for split, ds in (("train", train), ("val", val), ("test", test)):
        path = save_dataset(ds, args.out, split)
        print(f"wrote {path} ({ds.n_images} images, {len(ds)} captions)")
    with open(args.out / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return 0


def cmd_train(args) -> int:
    train_ds = _load_split(args.dataset, "train")
    val_ds = _load_split(args.dataset, "val")
    raw_dim = train_ds.regions[0].shape[0]
    model_cfg = _model_config_from_args(args, train_ds.vocab_size, raw_dim)
    loss_override = args.loss
    if args.variant is not None:
        model_cfg, variant_loss = variant_config(args.variant, model_cfg)
        if loss_override is None:
            loss_override = variant_loss
    args.loss = loss_override
    train_cfg = _train_config_from_args(args)

    args.out.mkdir(parents=True, exist_ok=True)
    ckpt_path = args.checkpoint or (args.out / "checkpoint.camp")
    stats_path = args.out / "stats.jsonl"
    resume = load_checkpoint(args.resume) if args.resume is not None else None

    started = time.monotonic()
    with open(stats_path, "w", encoding="utf-8") as fh:

        def on_epoch(record: dict) -> None:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            print(
                f"epoch {record['epoch']:3d}  loss {record['loss']:.4f}  "
                f"lr {record['lr']:.1e}  val_rsum {record['val_rsum']:.3f}"
            )

        best, history = fit(
            train_ds, val_ds, model_cfg, train_cfg, on_epoch=on_epoch, resume=resume
        )
    save_checkpoint(best, ckpt_path)
    elapsed = time.monotonic() - started
    print(
        f"best val rsum {best.best_rsum:.3f} at epoch {best.epoch} "
        f"({len(history)} epochs, {elapsed:.1f}s); checkpoint: {ckpt_path}"
    )
    return 0


def _params_from_checkpoint(ckpt: Checkpoint) -> tuple[CampParams, ModelConfig]:
    params = CampParams.init(ckpt.model_cfg, np.random.default_rng(0))
    params.load_state(ckpt.params)
    return params, ckpt.model_cfg


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params, model_cfg = _params_from_checkpoint(ckpt)
    ds = _load_split(args.dataset, args.split)
    report = evaluate_dataset(ds, params, model_cfg, threads=args.threads, n_folds=args.folds)
    print(report.to_json())
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    return 0


def run_ablation_grid(
    dataset_dir: Path, args, seeds: int
) -> list[dict]:
    train_ds = _load_split(dataset_dir, "train")
    val_ds = _load_split(dataset_dir, "val")
    test_ds = _load_split(dataset_dir, "test")
    raw_dim = train_ds.regions[0].shape[0]
    base_cfg = _model_config_from_args(args, train_ds.vocab_size, raw_dim)

    rows = []
    for name in ABLATION_GRID:
        cfg, loss = variant_config(name, base_cfg)
        rsums, reports = [], []
        for s in range(seeds):
            args.loss = loss
            train_cfg = _train_config_from_args(args)
            train_cfg = dataclasses.replace(train_cfg, loss=loss, seed=args.seed + s)
            best, _ = fit(train_ds, val_ds, cfg, train_cfg)
            params, _ = _params_from_checkpoint(best)
            report = evaluate_dataset(test_ds, params, cfg)
            rsums.append(report.rsum)
            reports.append(report.as_dict())
        rows.append(
            {
                "variant": name,
                "loss": loss,
                "seeds": seeds,
                "rsum": float(np.mean(rsums)),
                "reports": reports,
            }
        )
    return rows


def cmd_ablate(args) -> int:
    rows = run_ablation_grid(args.dataset, args, args.seeds)
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant':<{width}}  {'loss':<12} {'rsum':>7}")
    for r in rows:
        print(f"{r['variant']:<{width}}  {r['loss']:<12} {r['rsum']:>7.3f}")
    camp_rsum = next(r["rsum"] for r in rows if r["variant"] == "camp")
    worse = [r["variant"] for r in rows if r["variant"] != "camp" and r["rsum"] > camp_rsum]
    if worse:
        print(f"note: variants exceeding the full model on this run: {', '.join(worse)}")
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


def cmd_gradcheck(args) -> int:
    from camp.gradsuite import run_grad_suite

    results = run_grad_suite(seed=args.seed)
    ok = True
    for name, err in results.items():
        status = "ok" if err < 1e-4 else "FAIL"
        if err >= 1e-4:
            ok = False
        print(f"{name:<28} worst rel err {err:9.3e}  {status}")
    print("gradient suite:", "all passed" if ok else "FAILURES above")
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params, model_cfg = _params_from_checkpoint(ckpt)
    ds = _load_split(args.dataset, args.split)
    i, j = args.pair
    if not (0 <= i < ds.n_images and 0 <= j < len(ds)):
        raise DataError(f"pair ({i}, {j}) outside dataset with "
                        f"{ds.n_images} images / {len(ds)} captions")
    v = encode_image(np.asarray(ds.regions[i], dtype=np.float64), params.encoder)
    t, mask = encode_caption(ds.captions[j], params.encoder, model_cfg)
    score, diag = forward_diagnostics(FeatureBatch(v, t, mask), params, model_cfg)
    payload = {
        "image": i,
        "caption": j,
        "is_positive": ds.cap_to_img[j] == i,
        "score": score.item(),
        "gate_mean": diag.get("gate_mean"),
        "gate_mean_visual": diag.get("gate_mean_visual"),
        "gate_mean_textual": diag.get("gate_mean_textual"),
        "region_gate_means": (
            diag["gates_visual"].mean(axis=0).tolist() if "gates_visual" in diag else None
        ),
        "word_gate_means": (
            diag["gates_textual"].mean(axis=0).tolist() if "gates_textual" in diag else None
        ),
    }
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def run(argv: list[str]) -> int:
    """Parse and execute; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags, 0 on --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (DataError, ConfigError, ParamError) as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1
    except (TensorError, DomainError, EncodingError, OSError, ValueError) as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
