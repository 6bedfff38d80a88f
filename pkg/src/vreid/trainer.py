"""Progressive four-phase training with explicit freeze contracts.

Phase order is VIEW, TYPE, COLOR, JOINT. Each attribute phase runs two
sub-steps: first the predictor alone against its attribute labels, then
the phase's extractor units plus the embedding against the identity loss,
using the fused composition built from the attributes unlocked so far.
JOINT fine-tunes everything with the identity loss.

Frozen modules run in eval mode with gradients disabled, so both their
parameters and their BN buffers stay byte-identical through a phase.
All shuffling and augmentation draws come from position-keyed streams;
resuming from a checkpoint therefore reproduces the uninterrupted
trajectory bit for bit.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import AugmentationConfig, Manifest, augment, load_images
from .errors import ConfigError, DivergenceError, NonFiniteError, PhaseOrderError
from .model import ATTRIBUTE_K, ModelConfig, ReidNet, attribute_loss, id_loss
from .nn import Module
from .optim import Adam
from .rng import stream
from .tensor import Tape, Tensor, backward

PHASES = ("view", "type", "color", "joint")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.96
    epochs_view: int = 20
    epochs_type: int = 20
    epochs_color: int = 20
    epochs_joint: int = 40
    seed: int = 0
    augment: bool = True
    detach_weights: bool = False
    pretrained_attributes: bool = False
    joint_patience: int = 0   # 0 disables early stopping
    attributes: Tuple[str, ...] = ("view", "type", "color")

    def __post_init__(self):
        bad = [a for a in self.attributes if a not in PHASES[:3]]
        if bad or len(set(self.attributes)) != len(self.attributes):
            raise ConfigError(f"attributes must be distinct among "
                              f"{PHASES[:3]}, got {self.attributes}")

    @property
    def phases(self) -> Tuple[str, ...]:
        return tuple(self.attributes) + ("joint",)

    def epochs_for(self, phase: str) -> int:
        return getattr(self, f"epochs_{phase}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_decay ** epoch


@dataclass(frozen=True)
class SubStep:
    kind: str                 # "attr" | "id"
    attribute: Optional[str]  # attr sub-steps and id unlock target
    enabled: Tuple[str, ...]  # fused composition for the id loss


def substeps_for(phase: str, cfg: TrainConfig) -> List[SubStep]:
    if phase == "joint":
        return [SubStep("id", None, tuple(cfg.attributes))]
    unlocked = cfg.attributes[: cfg.attributes.index(phase) + 1]
    steps = []
    if not cfg.pretrained_attributes:
        steps.append(SubStep("attr", phase, ()))
    steps.append(SubStep("id", phase, tuple(unlocked)))
    return steps


def new_schedule() -> dict:
    return {"completed": [], "phase": None, "substep": 0, "epochs_done": 0}


class Trainer:
    def __init__(self, model: ReidNet, manifest: Manifest, manifest_dir: str,
                 cfg: TrainConfig, run_dir: str, config_digest: bytes = b"\x00" * 32,
                 val_fn=None, log_fn=None):
        self.model = model
        self.cfg = cfg
        self.run_dir = run_dir
        self.config_digest = config_digest
        self.val_fn = val_fn
        self.log_fn = log_fn
        os.makedirs(run_dir, exist_ok=True)

        train_recs = manifest.subset("train")
        if not train_recs:
            raise ConfigError("manifest has no train records")
        ids = sorted({r.id for r in train_recs})
        if len(ids) != model.cfg.n_ids:
            raise ConfigError(
                f"model built for {model.cfg.n_ids} identities, manifest has {len(ids)}")
        id_map = {ident: i for i, ident in enumerate(ids)}
        self.records = train_recs
        self.images = load_images(manifest_dir, train_recs)
        self.id_labels = np.array([id_map[r.id] for r in train_recs])
        self.attr_labels = {
            "view": np.array([r.view for r in train_recs]),
            "type": np.array([r.type for r in train_recs]),
            "color": np.array([r.color for r in train_recs]),
        }
        self.schedule = new_schedule()
        self._opt: Optional[Adam] = None
        self._pending_opt_state = None
        self._aug_cfg = AugmentationConfig()

    # -- module selection ---------------------------------------------------

    def _trainable_modules(self, phase: str, sub: SubStep) -> List[Module]:
        m = self.model
        if phase == "joint":
            return [m]
        if sub.kind == "attr":
            return [m.subnet(sub.attribute).predictor]
        return [m.subnet(sub.attribute).units, m.embedding]

    def _configure(self, phase: str, sub: SubStep) -> List[Tuple[str, Tensor]]:
        self.model.eval().set_trainable(False)
        named = dict(self.model.named_parameters())
        out = []
        for mod in self._trainable_modules(phase, sub):
            mod.train(True).set_trainable(True)
        for name, p in named.items():
            if p.requires_grad:
                out.append((name, p))
        return out

    # -- batching -----------------------------------------------------------

    def _batches(self, phase: str, substep: int, epoch: int):
        n = len(self.records)
        order = stream(self.cfg.seed, "shuffle", phase, substep, epoch).permutation(n)
        bs = self.cfg.batch_size
        for start in range(0, n, bs):
            batch = order[start : start + bs]
            if len(batch) >= 2:
                yield batch

    def _batch_images(self, idx: np.ndarray, phase: str, substep: int, epoch: int) -> np.ndarray:
        if not self.cfg.augment:
            return self.images[idx]
        out = np.empty_like(self.images[: len(idx)])
        for j, i in enumerate(idx):
            rng = stream(self.cfg.seed, "aug", phase, substep, epoch, int(i))
            out[j] = augment(self.images[i], self._aug_cfg, rng)
        return out

    # -- one epoch ----------------------------------------------------------

    def _epoch(self, phase: str, sub: SubStep, substep: int, epoch: int) -> Tuple[float, Optional[float]]:
        assert self._opt is not None
        self._opt.lr = lr_at(epoch, self.cfg)
        losses = []
        correct = total = 0
        for idx in self._batches(phase, substep, epoch):
            x = Tensor(self._batch_images(idx, phase, substep, epoch))
            self._opt.zero_grad()
            try:
                with Tape() as tape:
                    if sub.kind == "attr":
                        w = self.model.predict_attribute(x, sub.attribute)
                        labels = self.attr_labels[sub.attribute][idx]
                        loss = attribute_loss(w, labels, ATTRIBUTE_K[sub.attribute])
                        correct += int((w.data.argmax(axis=1) == labels).sum())
                        total += len(idx)
                    else:
                        out = self.model.forward(x, enabled=sub.enabled,
                                                 detach_weights=self.cfg.detach_weights)
                        loss = id_loss(out["id_logits"], self.id_labels[idx],
                                       self.model.cfg.n_ids)
                    backward(tape, loss)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite loss in phase {phase} substep {substep} epoch {epoch}: {exc}"
                ) from exc
            self._opt.step()
            losses.append(loss.item())
        acc = correct / total if total else None
        return float(np.mean(losses)), acc

    # -- logging / checkpointing -------------------------------------------

    def _log(self, phase: str, substep: int, epoch: int, loss: float,
             acc: Optional[float], lr: float) -> None:
        path = os.path.join(self.run_dir, "metrics.csv")
        fresh = not os.path.exists(path)
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if fresh:
                w.writerow(["phase", "substep", "epoch", "loss", "attr_acc", "lr"])
            w.writerow([phase, substep, epoch, f"{loss:.17g}",
                        "" if acc is None else f"{acc:.6f}", f"{lr:.17g}"])

    def checkpoint_path(self) -> str:
        return os.path.join(self.run_dir, "checkpoint.ckpt")

    def _save(self) -> None:
        opt_state = self._opt.state_dict() if self._opt is not None else {}
        save_checkpoint(self.checkpoint_path(), self.config_digest,
                        self.model.state_arrays(), opt_state, self.schedule)

    def resume(self) -> None:
        """Load the rolling checkpoint; config digests must match."""
        path = self.checkpoint_path()
        digest, params, opt_state, schedule = load_checkpoint(path)
        if digest != self.config_digest:
            raise ConfigError(f"checkpoint {path} was written by a different config")
        self.model.load_state_arrays(params)
        self.schedule = schedule
        self._pending_opt_state = opt_state

    def load_donor(self, params: dict,
                   prefixes: Sequence[str] = ("backbone", "sub_view", "sub_type", "sub_color")) -> int:
        """Copy donor arrays whose names match the given module prefixes.

        Used by pretrained-subnetwork mode: the donor run may have a
        different identity count, so the embedding head is skipped by
        default. Returns the number of arrays copied.
        """
        own = self.model.state_arrays()
        copied = 0
        for name, arr in params.items():
            if not any(name == p or name.startswith(p + ".") for p in prefixes):
                continue
            if name not in own:
                raise ConfigError(f"donor array {name!r} has no destination")
            if own[name].shape != np.asarray(arr).shape:
                raise ConfigError(
                    f"donor array {name!r} shape {np.asarray(arr).shape} != {own[name].shape}")
            own[name][...] = arr
            copied += 1
        return copied

    # -- phase loop ---------------------------------------------------------

    def _check_order(self, phase: str) -> None:
        order = self.cfg.phases
        need = order[: order.index(phase)]
        missing = [p for p in need if p not in self.schedule["completed"]]
        if missing:
            raise PhaseOrderError(
                f"phase '{phase}' requires completed {list(need)}, missing {missing}")
        if phase in self.schedule["completed"]:
            raise PhaseOrderError(f"phase '{phase}' already completed")
        active = self.schedule["phase"]
        if active is not None and active != phase:
            raise PhaseOrderError(f"phase '{active}' is mid-flight, cannot start '{phase}'")

    def run_phase(self, phase: str) -> None:
        if phase not in self.cfg.phases:
            raise ConfigError(f"unknown phase {phase!r}")
        self._check_order(phase)
        steps = substeps_for(phase, self.cfg)
        resuming = self.schedule["phase"] == phase
        start_sub = self.schedule["substep"] if resuming else 0
        start_epoch = self.schedule["epochs_done"] if resuming else 0
        epochs = self.cfg.epochs_for(phase)
        for si in range(start_sub, len(steps)):
            sub = steps[si]
            named = self._configure(phase, sub)
            self._opt = Adam(named, lr=self.cfg.lr)
            if si == start_sub and resuming and self._pending_opt_state:
                self._opt.load_state_dict(self._pending_opt_state)
            self._pending_opt_state = None
            first_epoch = start_epoch if si == start_sub else 0
            for epoch in range(first_epoch, epochs):
                loss, acc = self._epoch(phase, sub, si, epoch)
                self._log(phase, si, epoch, loss, acc, self._opt.lr)
                if self.log_fn is not None:
                    extra = "" if acc is None else f" acc={acc:.4f}"
                    self.log_fn(f"phase={phase} substep={si} epoch={epoch} "
                                f"loss={loss:.6f}{extra}")
                self.schedule = {"completed": self.schedule["completed"], "phase": phase,
                                 "substep": si, "epochs_done": epoch + 1,
                                 "best_val": self.schedule.get("best_val"),
                                 "best_epoch": self.schedule.get("best_epoch")}
                stop = self._early_stop(phase, epoch)
                self._save()
                if stop:
                    break
        self.schedule = {"completed": self.schedule["completed"] + [phase], "phase": None,
                         "substep": 0, "epochs_done": 0}
        self._save()

    def _early_stop(self, phase: str, epoch: int) -> bool:
        """Update validation tracking; True when patience has run out."""
        if phase != "joint" or self.cfg.joint_patience <= 0 or self.val_fn is None:
            return False
        score = float(self.val_fn(self.model))
        best = self.schedule["best_val"]
        if best is None or score > best:
            self.schedule["best_val"] = score
            self.schedule["best_epoch"] = epoch
        return epoch - self.schedule["best_epoch"] >= self.cfg.joint_patience

    def run(self, phases: Optional[Sequence[str]] = None) -> None:
        for phase in (self.cfg.phases if phases is None else phases):
            if phase in self.schedule["completed"]:
                continue
            self.run_phase(phase)
