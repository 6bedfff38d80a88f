"""Command-line entry point.

One TOML config drives every command; all randomness derives from its
seed. Logs go to standard error; machine outputs (JSON, CSV, images) go
to files only. Exit codes: 0 success, 2 config problem, 3 missing file,
4 phase-order violation, 5 numeric divergence, 1 anything else, each with
a single ``category: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .dataset import generate_dataset, load_images, load_manifest, read_ppm, save_manifest
from .errors import (ConfigError, DivergenceError, PhaseOrderError, VreidError)
from .evaluate import (EvalProtocol, ranking_entries, ranking_grid, run_protocol,
                       save_report)
from .gan import load_gan, make_pairs, synthesize_augmentation, train_vsgan
from .model import ModelConfig, ReidNet, extract_descriptors
from .trainer import Trainer


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _manifest_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.dataset.dir, "manifest.jsonl")


def _build_model(cfg: RunConfig, manifest) -> ReidNet:
    n_ids = len({r.id for r in manifest.subset("train")})
    mc = ModelConfig(n_ids=n_ids, widths=tuple(cfg.model.widths),
                     descriptor_dim=cfg.model.descriptor_dim,
                     predictor_widths=tuple(cfg.model.predictor_widths))
    return ReidNet(mc, seed=cfg.seed)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = args.out or cfg.dataset.dir
    manifest = generate_dataset(out, cfg.dataset.identities, cfg.dataset.cameras,
                                cfg.dataset.views, cfg.seed,
                                cfg.dataset.train_fraction)
    splits = {}
    for r in manifest.records:
        splits[r.split] = splits.get(r.split, 0) + 1
    _log(f"gen-data: wrote {len(manifest.records)} images to {out} "
         + " ".join(f"{k}={v}" for k, v in sorted(splits.items())))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest = load_manifest(_manifest_path(cfg))
    model = _build_model(cfg, manifest)
    trainer = Trainer(model, manifest, cfg.dataset.dir, cfg.train_config(),
                      cfg.train.run_dir, config_digest=cfg.digest, log_fn=_log)
    if os.path.exists(trainer.checkpoint_path()):
        trainer.resume()
        _log(f"train: resumed at {trainer.schedule}")
    elif cfg.train.pretrained_attributes and cfg.train.donor_checkpoint:
        _, donor_params, _, _ = load_checkpoint(cfg.train.donor_checkpoint)
        copied = trainer.load_donor(donor_params)
        _log(f"train: loaded {copied} donor arrays")
    if args.phase == "all":
        trainer.run()
    else:
        trainer.run_phase(args.phase)
    _log(f"train: completed {trainer.schedule['completed']}")
    return 0


def cmd_train_gan(args) -> int:
    cfg = load_config(args.config)
    manifest = load_manifest(_manifest_path(cfg))
    src = cfg.gan.source_view if args.src_view is None else args.src_view
    dst = cfg.gan.target_view if args.dst_view is None else args.dst_view
    pairs = make_pairs(manifest.subset("train"), src, dst, cfg.seed,
                       count=cfg.gan.pairs)
    _, _, trace = train_vsgan(cfg.dataset.dir, pairs, cfg.gan_config(),
                              cfg.gan.run_dir, config_digest=cfg.digest)
    last = trace[-1]
    _log(f"train-gan: {len(pairs)} pairs {src}->{dst}, "
         f"epoch {last['epoch']} d_loss={last['d_loss']:.4f} g_l1={last['g_l1']:.4f}")
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    count = cfg.gan.count if args.count is None else args.count
    manifest = load_manifest(_manifest_path(cfg))
    gen, _ = load_gan(os.path.join(cfg.gan.run_dir, "gan.ckpt"))
    extended = synthesize_augmentation(cfg.dataset.dir, manifest, gen,
                                       cfg.gan.source_view, cfg.gan.target_view,
                                       count, cfg.seed)
    save_manifest(extended, _manifest_path(cfg))
    _log(f"synth: added {len(extended.records) - len(manifest.records)} images")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = args.checkpoint or os.path.join(cfg.train.run_dir, "checkpoint.ckpt")
    digest, params, _, _ = load_checkpoint(ckpt)
    if digest != cfg.digest:
        raise ConfigError(f"checkpoint {ckpt} was written by a different config")
    manifest = load_manifest(_manifest_path(cfg))
    model = _build_model(cfg, manifest)
    model.load_state_arrays(params)
    records = [r for r in manifest.records if r.split in ("query", "gallery")]
    descriptors = extract_descriptors(model, load_images(cfg.dataset.dir, records),
                                      enabled=cfg.train.attributes)
    mode = args.protocol or cfg.eval.protocol
    protocol = EvalProtocol(
        mode=mode, trials=cfg.eval.trials, seed=cfg.seed,
        gallery_size=cfg.eval.gallery_size or None, max_rank=cfg.eval.max_rank)
    report = run_protocol(descriptors, records, protocol)
    if mode == "VERI":
        report["ranking"] = ranking_entries(descriptors, records, protocol)
    report["dataset_dir"] = os.path.abspath(cfg.dataset.dir)
    parent = os.path.dirname(cfg.eval.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save_report(report, cfg.eval.out)
    shown = "none" if report["map"] is None else f"{report['map']:.4f}"
    _log(f"eval: {mode} map={shown} n_queries={report['n_queries']} "
         f"-> {cfg.eval.out}")
    return 0


def cmd_report(args) -> int:
    with open(args.eval_json) as f:
        data = json.load(f)
    entries = data.get("ranking")
    if not entries:
        raise ConfigError(f"{args.eval_json} has no ranking entries "
                          "(run `eval` with the VERI protocol first)")
    dataset_dir = data.get("dataset_dir", "")
    out_dir = args.out or os.path.splitext(args.eval_json)[0] + "_rankings"
    os.makedirs(out_dir, exist_ok=True)
    for i, entry in enumerate(entries):
        query = read_ppm(os.path.join(dataset_dir, entry["query"]))
        tiles = [read_ppm(os.path.join(dataset_dir, p))
                 for p in entry["gallery"][: args.top_k]]
        rels = entry["relevance"][: args.top_k]
        ranking_grid(query, tiles, rels, os.path.join(out_dir, f"query_{i:04d}.ppm"))
    _log(f"report: wrote {len(entries)} grids to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vreid",
        description="Attribute-guided vehicle re-identification pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic dataset")
    g.add_argument("--config", required=True, help="TOML run config")
    g.add_argument("--out", default=None, help="override [dataset] dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training phases in order")
    t.add_argument("--config", required=True, help="TOML run config")
    t.add_argument("--phase", default="all",
                   choices=["all", "view", "type", "color", "joint"],
                   help="phase to run (default: all remaining)")
    t.set_defaults(func=cmd_train)

    tg = sub.add_parser("train-gan", help="train the view-transfer GAN")
    tg.add_argument("--config", required=True, help="TOML run config")
    tg.add_argument("--src-view", type=int, default=None, help="source view index")
    tg.add_argument("--dst-view", type=int, default=None, help="target view index")
    tg.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("synth", help="synthesize augmentation images")
    s.add_argument("--config", required=True, help="TOML run config")
    s.add_argument("--count", type=int, default=None,
                   help="images to generate (default: [gan] count)")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True, help="TOML run config")
    e.add_argument("--checkpoint", default=None,
                   help="checkpoint path (default: train run dir)")
    e.add_argument("--protocol", choices=["VERI", "VEHICLEID"], default=None,
                   help="override [eval] protocol")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render ranking grids from an eval JSON")
    r.add_argument("--eval-json", required=True, help="report written by `eval`")
    r.add_argument("--top-k", type=int, default=5, help="gallery tiles per query")
    r.add_argument("--out", default=None, help="output directory for grids")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"{exc.category}: {exc}")
        return 2
    except FileNotFoundError as exc:
        _log(f"missing-file: {exc}")
        return 3
    except PhaseOrderError as exc:
        _log(f"{exc.category}: {exc}")
        return 4
    except DivergenceError as exc:
        _log(f"{exc.category}: {exc}")
        return 5
    except VreidError as exc:
        _log(f"{exc.category}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
