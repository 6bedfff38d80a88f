"""View-specified conditional GAN.

The generator maps a 6-channel concatenation of a source image and a
target-view reference (any identity) to a synthesized target-view image;
the discriminator judges real against generated, conditioned on the same
source. One GAN serves one ordered (source_view, target_view) pair.

The L1 anchor is selectable: ``input`` penalizes distance to the source
image, ``target`` to the same-identity ground-truth image at the target
view (which every pair must then carry).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Record, load_images, write_ppm
from .errors import ConfigError, DivergenceError, NonFiniteError, PairingError
from .model import VIEW_CLASSES
from .nn import Conv2d, ConvBnRelu, Module
from .optim import Adam
from .rng import stream
from .tensor import Tape, Tensor, backward

LAMBDA_L1 = 100.0
GAN_WIDTHS = (16, 32, 64)


@dataclass(frozen=True)
class ViewPair:
    source: Record
    reference: Record
    target_truth: Optional[Record] = None

    def __post_init__(self):
        if self.source.view == self.reference.view:
            raise PairingError(
                f"source and reference share view {self.source.view}")
        t = self.target_truth
        if t is not None:
            if t.id != self.source.id:
                raise PairingError(
                    f"target_truth id {t.id} != source id {self.source.id}")
            if t.view != self.reference.view:
                raise PairingError(
                    f"target_truth view {t.view} != reference view {self.reference.view}")


def _check_view(view: int, what: str) -> None:
    if not 0 <= view < len(VIEW_CLASSES):
        raise PairingError(f"{what} view {view} out of range")


def make_pairs(manifest, source_view: int, target_view: int, seed: int,
               count: Optional[int] = None) -> List[ViewPair]:
    """Build deterministic (source, reference, truth) pairs.

    References come from any identity with the target view. ``count`` draws
    that many sources with replacement; default is one pair per source
    image in manifest order.
    """
    _check_view(source_view, "source")
    _check_view(target_view, "target")
    if source_view == target_view:
        raise PairingError(f"source and target view are both {source_view}")
    records = getattr(manifest, "records", manifest)
    sources = [r for r in records if r.view == source_view]
    refs = [r for r in records if r.view == target_view]
    if not sources:
        raise PairingError(f"no records with source view {source_view}")
    if not refs:
        raise PairingError(f"no records with target view {target_view}")
    truths: Dict[int, Record] = {}
    for r in sorted(refs, key=lambda r: r.path, reverse=True):
        truths[r.id] = r
    rng = stream(seed, "pairs", source_view, target_view)
    if count is None:
        chosen = sources
    else:
        chosen = [sources[i] for i in rng.integers(0, len(sources), size=count)]
    pairs = []
    for src in chosen:
        ref = refs[int(rng.integers(0, len(refs)))]
        pairs.append(ViewPair(src, ref, truths.get(src.id)))
    return pairs


class Generator(Module):
    """3-level encoder/decoder with skip connections, sigmoid output."""

    def __init__(self, seed: int = 0, widths: Tuple[int, int, int] = GAN_WIDTHS):
        super().__init__()
        rng = stream(seed, "gan-generator-init")
        w0, w1, w2 = widths
        self.enc1 = ConvBnRelu(6, w0, 3, rng, stride=2, padding=1)
        self.enc2 = ConvBnRelu(w0, w1, 3, rng, stride=2, padding=1)
        self.enc3 = ConvBnRelu(w1, w2, 3, rng, stride=2, padding=1)
        self.dec3 = ConvBnRelu(w2, w1, 3, rng, stride=1, padding=1)
        self.dec2 = ConvBnRelu(w1 + w1, w0, 3, rng, stride=1, padding=1)
        self.dec1 = ConvBnRelu(w0 + w0, w0, 3, rng, stride=1, padding=1)
        self.out = Conv2d(w0, 3, 1, rng, init="xavier")

    def forward(self, source: Tensor, reference: Tensor) -> Tensor:
        x = ops.concat_channels(source, reference)
        h1 = self.enc1.forward(x)
        h2 = self.enc2.forward(h1)
        h3 = self.enc3.forward(h2)
        u = self.dec3.forward(ops.upsample_nearest2x(h3))
        u = self.dec2.forward(ops.upsample_nearest2x(ops.concat_channels(u, h2)))
        u = self.dec1.forward(ops.upsample_nearest2x(ops.concat_channels(u, h1)))
        return ops.sigmoid(self.out.forward(u))


class Discriminator(Module):
    """Patch classifier over the 6-channel pair, averaged to one probability."""

    def __init__(self, seed: int = 0, widths: Tuple[int, int, int] = GAN_WIDTHS):
        super().__init__()
        rng = stream(seed, "gan-discriminator-init")
        w0, w1, _ = widths
        self.conv1 = ConvBnRelu(6, w0, 3, rng, stride=2, padding=1)
        self.conv2 = ConvBnRelu(w0, w1, 3, rng, stride=2, padding=1)
        self.patch = Conv2d(w1, 1, 3, rng, stride=1, padding=1, init="xavier")

    def forward(self, source: Tensor, candidate: Tensor) -> Tensor:
        x = ops.concat_channels(source, candidate)
        h = self.conv2.forward(self.conv1.forward(x))
        probs = ops.sigmoid(self.patch.forward(h))
        return ops.reshape(ops.global_avg_pool(probs), (x.shape[0],))


def _mean_neg_log(p: Tensor) -> Tensor:
    return ops.scale(ops.mean_all(ops.log_clamped(p)), -1.0)


def _mean_neg_log1m(p: Tensor) -> Tensor:
    ones = Tensor(np.ones(p.shape))
    return ops.scale(ops.mean_all(ops.log_clamped(ops.sub(ones, p))), -1.0)


def gan_loss(gen, disc, source: Tensor, reference: Tensor,
             anchor: Optional[Tensor] = None, lam: float = LAMBDA_L1,
             variant: str = "non-saturating") -> Tuple[Tensor, Tensor]:
    """(generator_loss, discriminator_loss) at the current parameters.

    ``anchor`` defaults to the source image. The minimax variant replaces
    the non-saturating generator term with +log(1 - D(fake)).
    """
    if variant not in ("non-saturating", "minimax"):
        raise ConfigError(f"unknown gan loss variant {variant!r}")
    fake = gen.forward(source, reference)
    d_real = disc.forward(source, reference)
    d_fake = disc.forward(source, fake)
    loss_d = ops.add_maps(_mean_neg_log(d_real), _mean_neg_log1m(d_fake))
    if variant == "non-saturating":
        adv = _mean_neg_log(d_fake)
    else:
        adv = ops.mean_all(ops.log_clamped(ops.sub(Tensor(np.ones(d_fake.shape)), d_fake)))
    if anchor is None:
        anchor = source
    loss_g = ops.add_maps(adv, ops.scale(ops.l1_loss(fake, anchor), lam))
    return loss_g, loss_d


@dataclass(frozen=True)
class GanConfig:
    batch_size: int = 16
    lr: float = 2e-4
    epochs: int = 1
    seed: int = 0
    lam: float = LAMBDA_L1
    l1_anchor: str = "input"       # "input" | "target"
    variant: str = "non-saturating"
    widths: Tuple[int, int, int] = GAN_WIDTHS

    def __post_init__(self):
        if self.l1_anchor not in ("input", "target"):
            raise ConfigError(f"l1_anchor must be 'input' or 'target', got {self.l1_anchor!r}")
        if self.variant not in ("non-saturating", "minimax"):
            raise ConfigError(f"unknown gan loss variant {self.variant!r}")


def train_vsgan(manifest_dir: str, pairs: Sequence[ViewPair], cfg: GanConfig,
                run_dir: str, config_digest: bytes = b"\x00" * 32):
    """Alternating D/G training; returns (generator, discriminator, trace).

    The trace holds one dict per epoch with mean d_loss, g_adv, g_l1 and,
    when every pair carries ground truth, mean L1 to the truth image.
    """
    if not pairs:
        raise PairingError("no pairs to train on")
    if cfg.l1_anchor == "target" and any(p.target_truth is None for p in pairs):
        raise ConfigError("l1_anchor='target' requires target_truth on every pair")
    sources = load_images(manifest_dir, [p.source for p in pairs])
    refs = load_images(manifest_dir, [p.reference for p in pairs])
    truths = None
    if all(p.target_truth is not None for p in pairs):
        truths = load_images(manifest_dir, [p.target_truth for p in pairs])

    gen = Generator(cfg.seed, cfg.widths)
    disc = Discriminator(cfg.seed, cfg.widths)
    adam_g = Adam(list(dict(gen.named_parameters()).items()), lr=cfg.lr)
    adam_d = Adam(list(dict(disc.named_parameters()).items()), lr=cfg.lr)
    os.makedirs(run_dir, exist_ok=True)

    trace = []
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "gan-shuffle", epoch).permutation(len(pairs))
        sums = {"d_loss": 0.0, "g_adv": 0.0, "g_l1": 0.0, "l1_truth": 0.0}
        n_batches = 0
        for start in range(0, len(pairs), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            v = Tensor(sources[idx])
            r = Tensor(refs[idx])
            try:
                with Tape() as tape_g:
                    fake = gen.forward(v, r)
                adam_d.zero_grad()
                with Tape() as tape_d:
                    d_real = disc.forward(v, r)
                    d_fake = disc.forward(v, Tensor(fake.data))
                    loss_d = ops.add_maps(_mean_neg_log(d_real), _mean_neg_log1m(d_fake))
                    backward(tape_d, loss_d)
                adam_d.step()
                adam_g.zero_grad()
                with tape_g:
                    d_fake_g = disc.forward(v, fake)
                    if cfg.variant == "non-saturating":
                        adv = _mean_neg_log(d_fake_g)
                    else:
                        ones = Tensor(np.ones(d_fake_g.shape))
                        adv = ops.mean_all(ops.log_clamped(ops.sub(ones, d_fake_g)))
                    anchor = Tensor(truths[idx]) if cfg.l1_anchor == "target" else v
                    l1 = ops.l1_loss(fake, anchor)
                    loss_g = ops.add_maps(adv, ops.scale(l1, cfg.lam))
                    backward(tape_g, loss_g)
                adam_g.step()
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite gan loss at epoch {epoch}: {exc}") from exc
            sums["d_loss"] += loss_d.item()
            sums["g_adv"] += adv.item()
            sums["g_l1"] += l1.item()
            if truths is not None:
                sums["l1_truth"] += float(np.abs(fake.data - truths[idx]).mean())
            n_batches += 1
        entry = {"epoch": epoch}
        entry.update({k: v / n_batches for k, v in sums.items()})
        if truths is None:
            del entry["l1_truth"]
        trace.append(entry)
        _save_gan(os.path.join(run_dir, "gan.ckpt"), config_digest, gen, disc,
                  adam_g, adam_d, {"epoch": epoch + 1, "epochs": cfg.epochs,
                                   "widths": list(cfg.widths)})
    _write_trace(os.path.join(run_dir, "gan_metrics.csv"), trace)
    return gen, disc, trace


def _save_gan(path, digest, gen, disc, adam_g, adam_d, schedule) -> None:
    params = {f"gen.{k}": v for k, v in gen.state_arrays().items()}
    params.update({f"disc.{k}": v for k, v in disc.state_arrays().items()})
    opt = {f"g.{k}": v for k, v in adam_g.state_dict().items()}
    opt.update({f"d.{k}": v for k, v in adam_d.state_dict().items()})
    save_checkpoint(path, digest, params, opt, schedule)


def load_gan(path: str, seed: int = 0):
    """Rebuild (generator, discriminator) from a GAN checkpoint."""
    _, params, _, schedule = load_checkpoint(path)
    widths = tuple(schedule.get("widths", GAN_WIDTHS))
    gen = Generator(seed, widths)
    disc = Discriminator(seed, widths)
    gen.load_state_arrays({k[4:]: v for k, v in params.items() if k.startswith("gen.")})
    disc.load_state_arrays({k[5:]: v for k, v in params.items() if k.startswith("disc.")})
    return gen, disc


def _write_trace(path: str, trace) -> None:
    if not trace:
        return
    cols = list(trace[0])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for entry in trace:
            w.writerow([entry[c] for c in cols])


def synthesize_augmentation(manifest_dir: str, manifest, gen: Generator,
                            source_view: int, target_view: int, count: int,
                            seed: int):
    """Generate ``count`` target-view images and append records for them.

    Sources come from the train split at the source view; each new record
    inherits identity, camera, type and color from its source, carries the
    target view, and is flagged synthetic. Returns the extended manifest.
    """
    from .dataset import Manifest

    if count == 0:
        return manifest
    train = [r for r in manifest.records if r.split == "train"]
    pool = [r for r in train if r.view == source_view]
    refs = [r for r in train if r.view == target_view]
    if not pool:
        raise PairingError(f"no train records with source view {source_view}")
    if not refs:
        raise PairingError(f"no train records with target view {target_view}")
    rng = stream(seed, "synthesize", source_view, target_view)
    chosen = [pool[i] for i in rng.integers(0, len(pool), size=count)]
    chosen_refs = [refs[i] for i in rng.integers(0, len(refs), size=count)]
    start = sum(1 for r in manifest.records if r.synthetic)
    was_training = gen.training
    gen.eval()
    new_records = []
    batch = 16
    for b0 in range(0, count, batch):
        srcs = chosen[b0 : b0 + batch]
        rfs = chosen_refs[b0 : b0 + batch]
        v = Tensor(load_images(manifest_dir, srcs))
        r = Tensor(load_images(manifest_dir, rfs))
        fake = gen.forward(v, r).data
        for j, src in enumerate(srcs):
            rel = f"images/gen_{start + b0 + j:08d}.ppm"
            write_ppm(os.path.join(manifest_dir, rel), fake[j].transpose(1, 2, 0))
            new_records.append(Record(path=rel, id=src.id, camera=src.camera,
                                      view=target_view, type=src.type, color=src.color,
                                      split=src.split, synthetic=True))
    gen.train(was_training)
    return Manifest(records=list(manifest.records) + new_records)
