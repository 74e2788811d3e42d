"""``mudeep`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, load_into_model, model_blobs, save_checkpoint
from .config import RunConfig, parse_assignment
from .data import ImageSet, load_image, synth_generate, write_manifest
from .errors import CheckpointError, ConfigError, DataFormatError, NumericError, ProtocolError
from .evaluation import BACKENDS, cmc_single_shot, export_saliency
from .gradcheck import model_gradcheck
from .model import MuDeep
from .training import Trainer, write_metrics_csv

log = logging.getLogger("mudeep")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_default: str | None) -> None:
    p.add_argument("--config", default=config_default,
                   help="key=value config file, or a preset name (paper, desk)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry; repeatable, last wins")
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/OpenMP threads (default: $MUDEEP_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mudeep", description="Multi-scale Siamese person re-identification network.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a manifest")
    _common(p, "desk")
    p.add_argument("--data", help="training manifest (overrides data.train_manifest)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=50)

    p = sub.add_parser("eval", help="single-shot CMC evaluation")
    _common(p, None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--probe-manifest")
    p.add_argument("--gallery-manifest")
    p.add_argument("--trials", type=int)
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--out", help="directory for cmc.csv")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _common(p, "desk")
    p.add_argument("--coords", type=int, default=20, help="sampled entries per parameter group")

    p = sub.add_parser("synth", help="generate the synthetic two-camera corpus")
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--per-cam", type=int, default=8)
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("visualize", help="export saliency heatmaps for an image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--imgA", required=True)
    p.add_argument("--imgB", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("inspect", help="print the layer-by-layer shape table")
    _common(p, "paper")
    return ap


def resolve_threads(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get("MUDEEP_THREADS", "")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"MUDEEP_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def resolve_config(args, source: str | None = None) -> RunConfig:
    src = source if source is not None else args.config
    cfg = RunConfig.load(src) if isinstance(src, str) else src
    pairs = [parse_assignment(s) for s in args.overrides]
    if args.seed is not None:
        pairs.append(("train.seed", str(args.seed)))
    return cfg.with_overrides(pairs)


def _announce(cfg: RunConfig) -> None:
    print(f"seed: {cfg.train.seed}  config: {cfg.hash()}")


# --------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.data:
        cfg = cfg.with_overrides([("data.train_manifest", args.data)])
    if not cfg.data.train_manifest:
        raise UsageError("no training data: pass --data or set data.train_manifest")
    _announce(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = ImageSet.from_manifest(cfg.data.train_manifest, size=cfg.model.input_shape[1:])
    if cfg.model.use_classnet and dataset.num_identities != cfg.model.num_identities:
        log.info("setting model.num_identities to %d (from the manifest)", dataset.num_identities)
        cfg = cfg.with_overrides([("model.num_identities", str(dataset.num_identities))])
    model = MuDeep(cfg.model, seed=cfg.train.seed)
    start = 0
    velocity = {}
    if args.resume:
        ck = load_checkpoint(args.resume)
        load_into_model(model, ck)
        start = ck.iteration
        velocity = ck.section("velocity")
        if ck.mean is not None:
            dataset.mean = ck.mean
    trainer = Trainer(model, dataset, cfg.train, start_iteration=start)
    trainer.velocity.update(velocity)
    (out / "config.txt").write_text(cfg.serialize(), encoding="utf-8")

    def report(row):
        if args.log_every and row.iteration % args.log_every == 0:
            print(f"iter {row.iteration} stage {row.stage} lr {row.lr:g} "
                  f"loss_ver {row.loss_ver if row.loss_ver is not None else '-'} "
                  f"loss_cls {row.loss_cls if row.loss_cls is not None else '-'} acc_ver {row.acc_ver:.3f}",
                  flush=True)

    try:
        trainer.run(report)
    finally:
        write_metrics_csv(out / "metrics.csv", trainer.metrics)
    ck = Checkpoint(cfg.serialize(), model_blobs(model, trainer.iteration, dataset.mean, trainer.velocity))
    save_checkpoint(out / "model.mudp", ck)
    print(f"wrote {out / 'model.mudp'} and {out / 'metrics.csv'} ({trainer.iteration} iterations)")
    return EXIT_OK


def _model_from_checkpoint(path: str) -> tuple[MuDeep, Checkpoint, RunConfig]:
    ck = load_checkpoint(path)
    cfg = RunConfig.parse(ck.config_text)
    model = MuDeep(cfg.model, seed=None)
    load_into_model(model, ck)
    return model, ck, cfg


def cmd_eval(args) -> int:
    model, ck, stored = _model_from_checkpoint(args.ckpt)
    cfg = resolve_config(args, args.config if args.config else stored)
    probe = args.probe_manifest or cfg.data.probe_manifest
    gallery = args.gallery_manifest or cfg.data.gallery_manifest
    if not probe or not gallery:
        raise UsageError("eval needs --probe-manifest and --gallery-manifest")
    trials = args.trials if args.trials is not None else cfg.eval.trials
    backend = args.backend or cfg.eval.backend
    if trials < 1:
        raise UsageError("--trials must be >= 1")
    _announce(cfg)
    size = cfg.model.input_shape[1:]
    p_set = ImageSet.from_manifest(probe, size=size)
    g_set = ImageSet.from_manifest(gallery, size=size)
    mean = ck.mean if ck.mean is not None else p_set.mean
    res = cmc_single_shot(model, p_set, g_set, trials, np.random.default_rng(cfg.train.seed), backend, mean=mean)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "cmc.csv")
    print(f"backend: {backend}  trials: {trials}  probes: {res.num_probes}  gallery: {res.gallery_size}")
    print(res.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    _announce(cfg)
    res = model_gradcheck(cfg.model, seed=cfg.train.seed, coords=args.coords)
    print(f"{'group':<12}{'coords':>8}{'max rel err':>14}")
    for g, err in res.groups.items():
        flag = "" if err <= GRADCHECK_TOL else "  FAIL"
        print(f"{g:<12}{res.coords[g]:>8}{err:>14.3e}{flag}")
    print(f"max relative error: {res.max_rel_error:.3e} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if res.max_rel_error <= GRADCHECK_TOL else EXIT_NUMERIC


def cmd_synth(args) -> int:
    print(f"seed: {args.seed}")
    records = synth_generate(args.ids, args.per_cam, args.seed, args.out, num_cameras=args.cameras)
    out = Path(args.out)
    for cam in range(args.cameras):
        write_manifest(out / f"cam{cam}.csv", [r for r in records if r.camera == cam])
    print(f"wrote {len(records)} images and {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    model, ck, cfg = _model_from_checkpoint(args.ckpt)
    _announce(cfg)
    size = cfg.model.input_shape[1:]
    mean = ck.mean if ck.mean is not None else np.zeros(3)
    a = load_image(args.imgA, mean, size)
    b = load_image(args.imgB, mean, size)
    files = export_saliency(model, a, b, args.out, top_m=args.top)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = resolve_config(args)
    _announce(cfg)
    model = MuDeep(cfg.model, seed=None)
    rows = model.shape_trace()
    w = max(len(r.layers) for r in rows) + 2
    print(f"{'section':<16}{'stream':<8}{'layers':<{w}}{'output':>12}{'params':>14}")
    for r in rows:
        print(f"{r.section:<16}{r.stream:<8}{r.layers:<{w}}{r.hwc():>12}{r.params:>14,}")
    print(f"total parameters: {model.num_parameters():,}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
            "visualize": cmd_visualize, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = resolve_threads(args.threads)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"mudeep {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ProtocolError, CheckpointError, FileNotFoundError, PermissionError) as e:
        print(f"mudeep {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"mudeep {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
