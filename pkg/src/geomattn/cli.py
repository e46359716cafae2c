"""Command-line entry point.

Subcommands: ``generate-data``, ``train``, ``evaluate``,
``visualize-attention``, ``gradcheck``. Every command writes a
``config.echo`` file with its fully-resolved configuration; feeding that
file back through ``--config`` reproduces the run bit for bit.

Exit codes: 0 success, 1 configuration error (bad flags, bad config file,
checkpoint/data mismatch), 2 data error (missing or unreadable files),
3 numeric failure (non-finite loss or gradients). ``evaluate`` keeps stdout
machine-readable (one JSON document); human-facing progress goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from geomattn.acm import AcmConfig, attention_mask
from geomattn.autodiff import (
    Tensor,
    RunningStats,
    batch_norm,
    box_sum2d,
    conv2d,
    grad_check,
)
from geomattn.config import ConfigError, RunConfig, resolve_run_config
from geomattn.data import (
    ReidDataset,
    generate_synthetic_dataset,
    load_manifest,
    rotate_image,
    save_dataset,
)
from geomattn.evaluation import EvalConfig, evaluate as run_evaluation
from geomattn.imageio import read_image, write_pgm, write_ppm
from geomattn.losses import (
    LossWeights,
    NonFiniteLossError,
    TripletBatch,
    hard_triplet_loss,
    overall_loss,
    smoothed_ce,
)
from geomattn.model import ArchConfig, ThreeBranchNet
from geomattn.optim import train as run_training
from geomattn.serialization import load_checkpoint

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors (1 = configuration error)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="geomattn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--ids", type=int, help="number of training identities")
        p.add_argument("--images-per-id", type=int, help="images per identity")
        p.add_argument("--image-size", type=int, help="square image size in pixels")
        p.add_argument("--held-out", type=int, help="held-out identities for retrieval")

    gen = sub.add_parser("generate-data", parents=[], help="render a synthetic dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--config", help="config file")
    gen.add_argument("--seed", type=int, help="master seed")
    add_data_flags(gen)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", help="config file")
    tr.add_argument("--out", default=".", help="output directory")
    tr.add_argument("--data", help="dataset directory containing train.csv")
    tr.add_argument("--synthetic", action="store_true", help="train on generated sprites")
    tr.add_argument("--seed", type=int, help="master seed")
    tr.add_argument("--epochs", type=int, help="training epochs")
    tr.add_argument("--preset", help="training preset: veri, vehicleid, desk")
    tr.add_argument("--lr0", type=float, help="base learning rate")
    tr.add_argument("--weight-decay", type=float, help="L2 weight decay")
    tr.add_argument("--tau", type=float, help="triplet margin")
    tr.add_argument("--P", type=int, help="identities per batch")
    tr.add_argument("--K", type=int, help="images per identity per batch")
    tr.add_argument("--checkpoint-every", type=int, help="checkpoint period in epochs")
    for tag in ("tri-gb", "sce-gb", "tri-ab", "sce-ab", "rot"):
        tr.add_argument(
            f"--lambda-{tag}", type=float, help=f"loss weight lambda_{tag.replace('-', '_')}"
        )
    add_data_flags(tr)

    ev = sub.add_parser("evaluate", help="retrieval metrics for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--query", required=True, help="query manifest CSV")
    ev.add_argument("--gallery", required=True, help="gallery manifest CSV")
    ev.add_argument("--out", help="metrics JSON file (default: metrics.json next to checkpoint)")
    ev.add_argument("--no-camera-filter", action="store_true")

    vis = sub.add_parser("visualize-attention", help="write attention heatmaps")
    vis.add_argument("--checkpoint", required=True)
    vis.add_argument("--out", required=True, help="output directory")
    vis.add_argument("images", nargs="+", help="PPM images to visualize")

    gc = sub.add_parser("gradcheck", help="finite-difference check of the core operations")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _flag_overrides(args, mapping: dict[str, str]) -> dict[str, str]:
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is None or value is False:
            continue
        out[key] = "true" if value is True else str(value)
    return out


_TRAIN_FLAG_MAP = {
    "ids": "data.num_identities",
    "images_per_id": "data.images_per_identity",
    "image_size": "data.image_size",
    "held_out": "data.held_out_identities",
    "seed": "run.seed",
    "epochs": "optim.epochs",
    "lr0": "optim.lr0",
    "weight_decay": "optim.weight_decay",
    "preset": "train.preset",
    "tau": "train.tau",
    "P": "train.P",
    "K": "train.K",
    "checkpoint_every": "train.checkpoint_every",
    "lambda_tri_gb": "weights.lambda_tri_gb",
    "lambda_sce_gb": "weights.lambda_sce_gb",
    "lambda_tri_ab": "weights.lambda_tri_ab",
    "lambda_sce_ab": "weights.lambda_sce_ab",
    "lambda_rot": "weights.lambda_rot",
    "synthetic": "run.synthetic",
    "data": "run.data_dir",
    "out": "run.out_dir",
}


def _write_echo(cfg: RunConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8") as fh:
        fh.write(cfg.echo())


def _load_train_split(cfg: RunConfig) -> ReidDataset:
    if cfg.synthetic:
        train_set, _, _ = generate_synthetic_dataset(cfg.spec)
        return train_set
    if cfg.data_dir is None:
        raise ConfigError("train needs --synthetic or --data pointing at a dataset")
    manifest = os.path.join(cfg.data_dir, "train.csv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"missing dataset manifest {manifest}")
    return load_manifest(manifest)


def cmd_generate_data(args) -> int:
    cfg = resolve_run_config(
        "generate-data",
        args.config,
        _flag_overrides(
            args,
            {
                "ids": "data.num_identities",
                "images_per_id": "data.images_per_identity",
                "image_size": "data.image_size",
                "held_out": "data.held_out_identities",
                "seed": "run.seed",
                "out": "run.out_dir",
            },
        ),
    )
    train_set, query, gallery = generate_synthetic_dataset(cfg.spec)
    save_dataset(cfg.out_dir, train_set, query, gallery)
    _write_echo(cfg, cfg.out_dir)
    print(
        f"wrote {len(train_set)} train / {len(query)} query / {len(gallery)} gallery "
        f"images to {cfg.out_dir}",
        file=sys.stderr,
    )
    return 0


def cmd_train(args) -> int:
    cfg = resolve_run_config("train", args.config, _flag_overrides(args, _TRAIN_FLAG_MAP))
    train_set = _load_train_split(cfg)
    ids = train_set.identities()
    if len(ids) != cfg.arch.num_identities:
        cfg.arch = ArchConfig(
            **{**cfg.arch.to_dict(), "num_identities": len(ids)}
        )
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_echo(cfg, cfg.out_dir)
    model = ThreeBranchNet(cfg.arch, np.random.default_rng(cfg.seed))
    ckpt = os.path.join(cfg.out_dir, "model.ckpt")
    log = os.path.join(cfg.out_dir, "train.log.jsonl")
    history = run_training(model, train_set, cfg.train, checkpoint_path=ckpt, log_path=log)
    for epoch, row in enumerate(history):
        print(f"epoch {epoch}: total {row['total']:.4f}", file=sys.stderr)
    print(f"checkpoint {ckpt}", file=sys.stderr)
    return 0


def _metrics_json(report) -> dict:
    out = {
        "imAP": report.imap,
        "cmc": {
            str(k): float(report.cmc[k - 1])
            for k in (1, 5, 10, 20, 50)
            if k <= len(report.cmc)
        },
        "excluded_queries": report.n_queries - report.n_evaluated,
    }
    if report.tmap is not None:
        out["tmAP"] = report.tmap
    return out


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    query = load_manifest(args.query)
    gallery = load_manifest(args.gallery)
    if gallery.samples and gallery.samples[0].track is None:
        print("gallery has no track column; tmAP will be omitted", file=sys.stderr)
    cfg = EvalConfig(filter_same_camera=not args.no_camera_filter)
    try:
        report = run_evaluation(model, query, gallery, cfg)
    except ValueError as exc:
        raise ConfigError(f"checkpoint/data mismatch: {exc}") from exc
    payload = json.dumps(_metrics_json(report), sort_keys=True)
    out_path = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "metrics.json"
    )
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(payload + "\n")
    print(payload)
    return 0


def _normalize_mask(q: np.ndarray) -> np.ndarray:
    lo, hi = float(q.min()), float(q.max())
    if hi - lo < 1e-12:
        return np.full_like(q, 0.5)
    return (q - lo) / (hi - lo)


def _overlay(image: np.ndarray, q: np.ndarray) -> np.ndarray:
    factor = image.shape[-1] // q.shape[-1]
    up = np.repeat(np.repeat(_normalize_mask(q), factor, axis=0), factor, axis=1)
    heat = np.stack([up, np.zeros_like(up), 1.0 - up])
    return 0.5 * image + 0.5 * heat


def cmd_visualize_attention(args) -> int:
    model = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    cosines = []
    for path in args.images:
        img = read_image(path)
        if img.ndim != 3:
            raise ConfigError(f"{path}: need a color (P6) image")
        if img.shape[1] % 8 or img.shape[2] % 8:
            raise ConfigError(
                f"{path}: image is {img.shape[1]}x{img.shape[2]}; the attention "
                "grid needs sides divisible by 8"
            )
        x = Tensor(img[None])
        try:
            q0 = model.compute_attention(x, mode="eval").Q.data[0]
        except ValueError as exc:
            raise ConfigError(f"checkpoint/image mismatch for {path}: {exc}") from exc
        name = os.path.splitext(os.path.basename(path))[0]
        write_pgm(os.path.join(args.out, f"{name}.mask.pgm"), _normalize_mask(q0))
        write_ppm(os.path.join(args.out, f"{name}.overlay.ppm"), _overlay(img, q0))
        for k in (1, 2, 3):
            rot = rotate_image(Tensor(img), k)
            qk = model.compute_attention(Tensor(rot.data[None]), mode="eval").Q.data[0]
            write_ppm(
                os.path.join(args.out, f"{name}.rot{90 * k}.overlay.ppm"),
                _overlay(rot.data, qk),
            )
            a = np.rot90(q0, k).ravel()
            b = qk.ravel()
            denom = np.linalg.norm(a) * np.linalg.norm(b)
            cosines.append(float(a @ b / denom) if denom > 0 else 0.0)
    score = float(np.mean(cosines))
    print(json.dumps({"rotation_consistency": score, "images": len(args.images)}))
    return 0


def _gradcheck_battery() -> dict[str, object]:
    """Small fixed battery over every differentiable building block."""
    rng = np.random.default_rng(0)
    checks: dict[str, object] = {}

    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 2)))
    checks["matmul"] = grad_check(lambda: ((x @ w) * c).sum(), [x, w])

    xi = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    wi = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
    mix = Tensor(rng.normal(size=(2, 4, 3, 3)))
    checks["conv2d"] = grad_check(
        lambda: (conv2d(xi, wi, stride=2, pad=1) * mix).sum(), [xi, wi]
    )

    xb = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    mixb = Tensor(rng.normal(size=(1, 2, 5, 5)))
    checks["box_sum2d"] = grad_check(lambda: (box_sum2d(xb, 3) * mixb).sum(), [xb])

    xn = Tensor(rng.normal(size=(4, 3, 2, 2)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    beta = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    stats = RunningStats(3)
    mixn = Tensor(rng.normal(size=(4, 3, 2, 2)))
    checks["batch_norm"] = grad_check(
        lambda: (batch_norm(xn, gamma, beta, stats, mode="train") * mixn).sum()
        + (batch_norm(xn, gamma, beta, stats, mode="train") ** 3).sum() * 0.1,
        [xn, gamma, beta],
    )

    feats = Tensor(rng.normal(size=(8, 5)), requires_grad=True)
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    checks["triplet"] = grad_check(
        lambda: hard_triplet_loss(TripletBatch(feats, labels), 0.5),
        [feats],
        skip_kinks=True,
    )

    logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    cls = np.array([0, 1, 2, 3, 0, 1])
    checks["smoothed_ce"] = grad_check(lambda: smoothed_ce(logits, cls), [logits])

    lm = Tensor(rng.uniform(0.1, 2.0, size=(1, 3, 6, 6)), requires_grad=True)
    mixq = Tensor(rng.normal(size=(1, 6, 6)))
    checks["attention_mask"] = grad_check(
        lambda: (attention_mask(lm, AcmConfig(K=3)).Q * mixq).sum(),
        [lm],
        skip_kinks=True,
    )

    arch = ArchConfig(num_identities=4, input_size=16)
    model = ThreeBranchNet(arch, np.random.default_rng(1))
    imgs = Tensor(rng.uniform(size=(4, 3, 16, 16)))
    ids = np.array([0, 0, 1, 1])
    rots = np.array([0, 1, 2, 3])

    def full_loss():
        gb, shallow = model.global_branch_forward(imgs)
        ab, _ = model.attention_branch_forward(imgs, shallow)
        ssl = model.ssl_branch_forward(imgs)
        total, _ = overall_loss(gb, ab, ssl, ids, rots, LossWeights(), 0.5)
        return total

    params = list(model.parameters().values())
    checks["composite_loss"] = grad_check(
        full_loss, params, max_coords_per_param=2, rng=np.random.default_rng(2),
        skip_kinks=True,
    )
    return checks


def cmd_gradcheck(args) -> int:
    checks = _gradcheck_battery()
    worst = 0.0
    for name, res in checks.items():
        skipped = getattr(res, "n_skipped", 0)
        checked = getattr(res, "n_checked", 0)
        print(f"{name:16s} max_rel_err {float(res):.3e} (checked {checked}, skipped {skipped})")
        worst = max(worst, float(res))
    print(f"{'worst':16s} max_rel_err {worst:.3e}")
    if worst > args.tolerance:
        print(f"exceeds tolerance {args.tolerance:g}", file=sys.stderr)
        return 3
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "generate-data": cmd_generate_data,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "visualize-attention": cmd_visualize_attention,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
