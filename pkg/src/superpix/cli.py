"""Command-line front end: ``superpix features|segment|labels|train|eval``.

Examples::

    superpix features img.pgm img.ften
    superpix features img.ppm out.ften --channels Lab       # out_L, out_a, out_b
    superpix segment img.ppm img.spxl --features img.ften
    superpix segment img.ppm img.spxl --mode trainable --net model.spnn --features img.ften
    superpix labels train.spds --images a.ppm b.ppm --gts a.pgm b.pgm --features a.ften b.ften
    superpix train train.spds model.spnn --seed 3
    superpix eval report.csv --sp a.spxl b.spxl --gt a.pgm b_1.pgm,b_2.pgm

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from superpix.config import Config
from superpix.errors import InputError, NumericalError
from superpix.features import build_scattering_filters, parse_mask, scattering_transform
from superpix.imgio import (
    MultiChannelImage,
    concat_channels,
    load_image,
    load_pgm_labels,
    read_feature_file,
    read_labelmap,
    to_multichannel,
    upscale_nearest,
    write_feature_file,
    write_labelmap,
)
from superpix.labels import LabelGenConfig, generate_dataset, read_samples, write_samples
from superpix.metrics import evaluate
from superpix.nn import Adam, Network, build_classifier, build_regression, evaluate_loss, load_network, save_network, train_epoch
from superpix.slic import SlicParams, init_clusters, slic_segment
from superpix.trainpix import AnalyticSlic, NetworkClassifier, TrainpixParams, trainable_segment

log = logging.getLogger("superpix")

CHANNEL_SETS = {"L": ("L",), "Lab": ("L", "a", "b")}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"missing input file: {p}")
    return p


def _slic_params(cfg: Config) -> SlicParams:
    return SlicParams(
        step=cfg["slic.step"],
        compactness=cfg["slic.compactness"],
        iterations=cfg["slic.iterations"],
        alpha=cfg["slic.alpha"],
        beta=cfg["slic.beta"],
        min_component_frac=cfg["slic.min_component_frac"],
        perturb_seeds=cfg["slic.perturb_seeds"],
    )


def _bank(cfg: Config):
    return build_scattering_filters(cfg["scattering.J"], cfg["scattering.L"])


def load_lab(path) -> MultiChannelImage:
    return to_multichannel(load_image(_require(path)))


def with_features(img: MultiChannelImage, ften_paths, cfg: Config) -> MultiChannelImage:
    """Append every FTEN (upscaled to the image grid, masked per config) to ``img``."""
    if not ften_paths:
        return img
    bank = _bank(cfg)
    mask = parse_mask(cfg["scattering.mask"], bank)
    for i, p in enumerate(ften_paths):
        t = read_feature_file(_require(p))
        if t.map_count != len(mask):
            mask_i = None
            log.warning("%s has %d maps; mask ignored", p, t.map_count)
        else:
            mask_i = mask
        img = concat_channels(img, upscale_nearest(t, img.width, img.height), mask_i, prefix=f"f{i}_")
    return img


def _split_list(items):
    """``a,b`` -> [a, b]; used where one image owns several files."""
    return [[s for s in it.split(",") if s] for it in items]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_features(args, cfg: Config) -> int:
    channels = args.channels or cfg["scattering.channels"]
    if channels not in CHANNEL_SETS:
        raise InputError(f"--channels must be one of {sorted(CHANNEL_SETS)}, got {channels!r}")
    img = load_lab(args.image)
    bank = _bank(cfg)
    names = CHANNEL_SETS[channels]
    out = Path(args.out)
    targets = [out] if len(names) == 1 else [out.with_name(f"{out.stem}_{n}{out.suffix}") for n in names]

    def run(c):
        return scattering_transform(img.data[img.channel_names.index(names[c])], bank)

    with ThreadPoolExecutor(cfg["threads"]) as ex:
        tensors = list(ex.map(run, range(len(names))))
    for t, path in zip(tensors, targets):
        write_feature_file(path, t)
        log.info("wrote %s (%d maps, %dx%d)", path, t.map_count, t.width, t.height)
    return 0


def cmd_segment(args, cfg: Config) -> int:
    mode = args.mode or cfg["segment.mode"]
    img = with_features(load_lab(args.image), args.features, cfg)
    slic = _slic_params(cfg)
    if mode == "slic":
        sp = slic_segment(img, slic)
    elif mode == "trainable":
        if args.net is None:
            raise InputError("mode=trainable needs --net (a SPNN file or 'oracle')")
        if args.net == "oracle":
            # Every cluster is a candidate, so the oracle reproduces SLIC exactly.
            q = len(init_clusters(img, slic.step))
            classifier = AnalyticSlic(slic)
        else:
            net, _ = load_network(_require(args.net))
            q = net.spec.Q
            classifier = NetworkClassifier(net)
        params = TrainpixParams(
            step=slic.step,
            compactness=slic.compactness,
            Q=q,
            iterations=slic.iterations,
            min_component_frac=slic.min_component_frac,
        )
        sp = trainable_segment(img, params, classifier)
    else:
        raise InputError(f"unknown mode {mode!r}; use slic or trainable")
    write_labelmap(args.out, sp)
    log.info("wrote %s (%d superpixels)", args.out, sp.n_labels)
    return 0


def cmd_labels(args, cfg: Config) -> int:
    if len(args.images) != len(args.gts):
        raise InputError(f"{len(args.images)} images vs {len(args.gts)} ground truths")
    feats = _split_list(args.features) if args.features else [[] for _ in args.images]
    if len(feats) != len(args.images):
        raise InputError(f"{len(feats)} feature entries vs {len(args.images)} images")
    edges = None
    if args.edges:
        if len(args.edges) != len(args.images):
            raise InputError(f"{len(args.edges)} edge maps vs {len(args.images)} images")
        edges = [load_pgm_labels(_require(p)) for p in args.edges]
    images = [with_features(load_lab(p), f, cfg) for p, f in zip(args.images, feats)]
    gts = [load_pgm_labels(_require(p)) for p in args.gts]
    lcfg = LabelGenConfig(
        slic=_slic_params(cfg),
        method=cfg["labels.method"],
        X=cfg["labels.X"],
        Q=cfg["net.Q"],
        warmup_iterations=cfg["labels.warmup_iterations"],
        mistakes_only=cfg["labels.mistakes_only"],
        use_edges=cfg["labels.use_edges"],
        seed=cfg["seed"],
    )
    samples, stats = generate_dataset(images, gts, lcfg, edges)
    write_samples(args.out, samples)
    print(stats.line())
    return 0


def split_validation(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle under ``seed``; the last ``frac`` of the order is held out."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(frac * n))
    return order[: n - n_val], order[n - n_val :]


def cmd_train(args, cfg: Config) -> int:
    samples = read_samples(_require(args.samples))
    kind = cfg["net.kind"]
    if kind == "classification":
        spec = build_classifier(samples.M, samples.Q)
    elif kind == "regression_distance":
        spec = build_regression(samples.M, samples.Q, cfg["net.depth"])
    else:
        raise InputError(f"unknown net.kind {kind!r}")
    seed = cfg["seed"]
    tr_idx, va_idx = split_validation(len(samples), cfg["train.val_frac"], seed)
    train, val = samples.subset(tr_idx), samples.subset(va_idx)
    net = Network(spec, seed=seed)
    opt = Adam(lr=cfg["train.lr"]).bind(net)
    rng = np.random.default_rng(seed)
    for epoch in range(cfg["train.epochs"]):
        loss = train_epoch(net, opt, train, rng, cfg["train.batch_size"])
        if len(val):
            vl, acc = evaluate_loss(net, val)
            print(f"epoch {epoch} train_loss={loss:.6f} val_loss={vl:.6f} val_acc={acc:.4f}")
        else:
            print(f"epoch {epoch} train_loss={loss:.6f}")
        if not np.isfinite(loss):
            raise NumericalError(f"training loss became {loss}")
    save_network(args.out, net, opt)
    return 0


def _load_sp(path) -> np.ndarray:
    p = _require(path)
    if p.suffix.lower() == ".pgm":
        return load_pgm_labels(p)
    return read_labelmap(p).labels


def cmd_eval(args, cfg: Config) -> int:
    gts = _split_list(args.gt)
    with ThreadPoolExecutor(cfg["threads"]) as ex:
        sps = list(ex.map(_load_sp, args.sp))
        gt_sets = list(ex.map(lambda g: [load_pgm_labels(_require(p)) for p in g], gts))
    report = evaluate(sps, gt_sets, cfg["eval.tol"], names=[Path(p).stem for p in args.sp])
    Path(args.out).write_text(report.to_csv())
    print(report.to_csv().splitlines()[-1])
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    ap = argparse.ArgumentParser(prog="superpix", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[common], help="scattering features of an image")
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--channels", choices=sorted(CHANNEL_SETS))
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("segment", parents=[common], help="compute a superpixel map")
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--features", nargs="*", default=[])
    p.add_argument("--mode", choices=("slic", "trainable"))
    p.add_argument("--net", help="SPNN file, or 'oracle' for the analytic SLIC classifier")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("labels", parents=[common], help="generate a training set")
    p.add_argument("out")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--gts", nargs="+", required=True)
    p.add_argument("--features", nargs="*", help="per image: one FTEN, or several joined by commas")
    p.add_argument("--edges", nargs="*", help="per image: combined edge-count PGM")
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("train", parents=[common], help="train a classifier on a SPDS file")
    p.add_argument("samples")
    p.add_argument("out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics CSV for superpixel maps")
    p.add_argument("out")
    p.add_argument("--sp", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True, help="per image: one PGM, or several annotations joined by commas")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        overrides = {"seed": args.seed, "threads": args.threads}
        if getattr(args, "mode", None):
            overrides["segment.mode"] = args.mode
        cfg = Config.load(args.config and _require(args.config), overrides)
        for item in args.set:
            if "=" not in item:
                raise InputError(f"--set expects KEY=VALUE, got {item!r}")
            cfg.set(*(s.strip() for s in item.split("=", 1)))
        if cfg["threads"] < 1:
            raise InputError("threads must be >= 1")
        cfg.log_resolved()
        return args.func(args, cfg)
    except NumericalError as e:
        log.error("%s: %s", type(e).__name__, e)
        return 3
    except (InputError, ValueError, OSError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
