"""Command-line surface for training, evaluation, and the downstream tasks.

Every command reads a config (``--config``, plus ``--set section.key=value``
overrides), writes artifacts under ``--out``, and exits 0 on success, 2 on a
configuration error, 3 on a data error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import config as C
from . import data as D
from . import evaluation as E
from . import renderer as R
from . import tasks
from . import tensor as T
from .config import ConfigError
from .training import DataError, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def _load_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    if args.set:
        cfg = C.apply_overrides(cfg, args.set)
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    return cfg.validate()


def _load_dataset(cfg: C.RunConfig) -> D.ImageDataset:
    kind = cfg.data.kind
    if kind == "synthetic":
        if cfg.data.path:
            ds, _ = D.load_synthetic(cfg.data.path)
            return ds
        ds, _, _ = D.make_synthetic(
            cfg.synthetic, size=cfg.model.image_size, control_points=cfg.model.control_points,
            curve_samples=cfg.model.curve_samples,
        )
        return ds
    path = cfg.data.path or C.data_root()
    if kind == "idx":
        return D.load_idx_dataset(path, cfg.data.labels_path or None, split=cfg.data.split,
                                  size=cfg.model.image_size, invert=cfg.data.invert)
    return D.load_manifest(path, size=cfg.model.image_size, invert=cfg.data.invert, split=cfg.data.split)


def _restore(path):
    cfg, gen, rec, state = ckpt.build_from_checkpoint(path)
    return cfg, gen, rec, state


def _grid(images, cols: int) -> np.ndarray:
    images = np.asarray(images)
    n, h, w = images.shape
    rows = (n + cols - 1) // cols
    grid = np.zeros((rows * h, cols * w), dtype=images.dtype)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = img
    return grid


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(cfg)
    outcome = train(dataset, cfg, out_dir=args.out, resume_from=args.resume)
    if outcome.metrics:
        last = outcome.metrics[-1]
        print(f"step={last['step']} elbo={last['elbo']:.3f} mean_strokes={last['mean_strokes']:.2f}")
    if outcome.checkpoint_path:
        print(f"checkpoint={outcome.checkpoint_path}")
    return EXIT_OK


def cmd_eval_mll(args) -> int:
    cfg, gen, rec, _ = _restore(args.ckpt)
    if args.config or args.set:
        cfg = _load_config(args)
    data_cfg = cfg
    dataset = _load_dataset(data_cfg)
    images = dataset.images[: args.n_images]
    rng = np.random.default_rng(args.seed)
    values = E.iwae(gen, rec, images, args.k, rng)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "mll.csv")
    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write("dataset,k,n,mean,std\n")
        fh.write(f"{dataset.name},{args.k},{len(images)},{values.mean():.6f},{values.std():.6f}\n")
    print(f"iwae mean={values.mean():.4f} std={values.std():.4f} (k={args.k}, n={len(images)})")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg, gen, rec, _ = _restore(args.ckpt)
    if args.config or args.set:
        cfg = _load_config(args)
    dataset = _load_dataset(cfg)
    rng = np.random.default_rng(args.seed)
    images = dataset.images[: args.n]
    grid = E.reconstruction_grid(rec, images, rng)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "reconstructions.png")
    R.write_png(grid, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    _, gen, _, _ = _restore(args.ckpt)
    rng = np.random.default_rng(args.seed)
    with T.no_grad():
        final, _, _ = gen.rollout(args.n, rng, temperature=args.temperature)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "samples.png")
    R.write_png(_grid(np.clip(final.data, 0, 1), cols=8), out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_complete(args) -> int:
    cfg, gen, rec, _ = _restore(args.ckpt)
    if args.config or args.set:
        cfg = _load_config(args)
    dataset = _load_dataset(cfg)
    rng = np.random.default_rng(args.seed)
    outputs = []
    for img in dataset.images[: args.n]:
        partial = img.copy()
        partial[cfg.model.image_size // 2 :, :] = 0.0  # keep the top half
        outputs += [partial, tasks.complete(partial, gen, rec, rng, temperature=args.temperature)]
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "completions.png")
    R.write_png(_grid(np.stack(outputs), cols=2), out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_exemplars(args) -> int:
    cfg, gen, rec, _ = _restore(args.ckpt)
    if args.config or args.set:
        cfg = _load_config(args)
    dataset = _load_dataset(cfg)
    rng = np.random.default_rng(args.seed)
    support = dataset.images[args.index]
    out_imgs = tasks.exemplars(support, gen, rec, args.n, rng)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "exemplars.png")
    R.write_png(_grid(np.concatenate([support[None], out_imgs]), cols=args.n + 1), out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    _, gen, rec, _ = _restore(args.ckpt)
    episodes = tasks.read_episode_manifest(args.episodes)
    if not episodes:
        raise DataError(f"no episodes in {args.episodes}")
    root = os.path.dirname(os.path.abspath(args.episodes))
    rng = np.random.default_rng(args.seed)
    correct = total = 0
    for ep in episodes:
        supports = [R.read_png(os.path.join(root, p)) for p, _ in ep["supports"]]
        support_labels = [label for _, label in ep["supports"]]
        for qpath, qlabel in ep["queries"]:
            query = R.read_png(os.path.join(root, qpath))
            result = tasks.classify_episode(supports, query, gen, rec, rng, k=args.k, fit_steps=args.fit_steps)
            correct += int(support_labels[result.predicted] == qlabel)
            total += 1
    print(f"accuracy={correct / total:.4f}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg, gen, rec, _ = _restore(args.ckpt)
    if args.config or args.set:
        cfg = _load_config(args)
    dataset = _load_dataset(cfg)
    rng = np.random.default_rng(args.seed)
    result = E.cluster_strokes(rec, dataset.images[: args.n_images], k=args.k, rng=rng, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "clusters.csv")
    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write("image,step,cluster\n")
        for img_i, step_i, a in zip(result.image_index, result.step_index, result.assignments):
            fh.write(f"{img_i},{step_i},{a}\n")
    print(f"silhouette={result.silhouette:.4f} strokes={len(result.assignments)}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    cfg = _load_config(args)
    ds, trajectories, _ = D.make_synthetic(
        cfg.synthetic, size=cfg.model.image_size, control_points=cfg.model.control_points,
        curve_samples=cfg.model.curve_samples,
    )
    os.makedirs(args.out, exist_ok=True)
    D.save_synthetic(args.out, ds, trajectories)
    if args.pngs:
        png_dir = os.path.join(args.out, "pngs")
        os.makedirs(png_dir, exist_ok=True)
        records = []
        for i, img in enumerate(ds.images):
            rel = f"pngs/{i:05d}.png"
            R.write_png(img, os.path.join(args.out, rel))
            records.append((rel, int(ds.labels[i])))
        D.write_manifest(os.path.join(args.out, "manifest.tsv"), records)
    print(f"wrote {len(ds)} images to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strokegen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt=False):
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=None)
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint path")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-mll", help="IWAE marginal-likelihood estimate")
    common(p, ckpt=True)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--n-images", type=int, default=32)
    p.set_defaults(fn=cmd_eval_mll)

    p = sub.add_parser("reconstruct", help="reconstruction grid")
    common(p, ckpt=True)
    p.add_argument("--n", type=int, default=16)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("sample", help="unconditional generation")
    common(p, ckpt=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--temperature", type=float, default=0.7)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("complete", help="partial completion")
    common(p, ckpt=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--temperature", type=float, default=0.7)
    p.set_defaults(fn=cmd_complete)

    p = sub.add_parser("exemplars", help="character-conditioned generation")
    common(p, ckpt=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--index", type=int, default=0, help="support image index")
    p.set_defaults(fn=cmd_exemplars)

    p = sub.add_parser("classify", help="one-shot episode classification")
    common(p, ckpt=True)
    p.add_argument("--episodes", required=True, help="episode manifest path")
    p.add_argument("--k", type=int, default=5, help="type samples per class")
    p.add_argument("--fit-steps", type=int, default=50)
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("cluster", help="stroke clustering + silhouette")
    common(p, ckpt=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--n-images", type=int, default=128)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("make-synthetic", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--pngs", action="store_true", help="also write PNGs + manifest")
    p.set_defaults(fn=cmd_make_synthetic)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, D.DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
