"""The attribute-guided re-identification network.

Shared residual backbone with two taps, one subnetwork per attribute
(predictor plus K extractor units), probability-weighted fusion of the
unit outputs, cross-attribute sum fusion, and the embedding that yields
the retrieval descriptor and identity logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import LabelError, ShapeError
from .nn import BasicBlock, BatchNorm2d, Conv2d, ConvBnRelu, Linear, Module, ModuleList
from .rng import stream
from .tensor import Tape, Tensor

VIEW_CLASSES = ("front", "front_side", "side", "rear_side", "rear")
TYPE_CLASSES = ("sedan", "suv", "van", "hatchback", "mpv", "pickup", "bus", "truck", "estate")
COLOR_CLASSES = ("yellow", "orange", "green", "gray", "red", "blue", "white", "golden", "brown", "black")

ATTRIBUTES: Tuple[Tuple[str, int], ...] = (
    ("view", len(VIEW_CLASSES)),
    ("type", len(TYPE_CLASSES)),
    ("color", len(COLOR_CLASSES)),
)
ATTRIBUTE_K = dict(ATTRIBUTES)


@dataclass
class ModelConfig:
    n_ids: int
    widths: Tuple[int, int, int, int] = (16, 16, 32, 64)
    descriptor_dim: int = 512
    predictor_widths: Tuple[int, int, int] = (16, 32, 32)
    image_size: int = 64


def one_hot(labels: Sequence[int], k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise LabelError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise LabelError(f"label outside [0, {k})")
    q = np.zeros((labels.size, k))
    q[np.arange(labels.size), labels] = 1.0
    return q


class Backbone(Module):
    """Stem conv plus three residual stages; taps after stages 1 and 3."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        w0, w1, w2, w3 = cfg.widths
        self.stem = ConvBnRelu(3, w0, 3, rng, stride=1, padding=1)
        self.stage1 = ModuleList([BasicBlock(w0, w1, rng, stride=2), BasicBlock(w1, w1, rng)])
        self.stage2 = ModuleList([BasicBlock(w1, w2, rng, stride=2), BasicBlock(w2, w2, rng)])
        self.stage3 = ModuleList([BasicBlock(w2, w3, rng, stride=2), BasicBlock(w3, w3, rng)])

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"backbone expects Nx3xHxW, got {x.shape}")
        h = self.stem.forward(x)
        for block in self.stage1:
            h = block.forward(h)
        early = h
        for block in self.stage2:
            h = block.forward(h)
        for block in self.stage3:
            h = block.forward(h)
        return early, h


class Predictor(Module):
    """Three conv layers (5x5/3x3/5x5, strides 3/2/1) and an FC to K classes."""

    def __init__(self, cin: int, k: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        p0, p1, p2 = cfg.predictor_widths
        self.conv1 = ConvBnRelu(cin, p0, 5, rng, stride=3, padding=0)
        self.conv2 = ConvBnRelu(p0, p1, 3, rng, stride=2, padding=0)
        self.conv3 = ConvBnRelu(p1, p2, 5, rng, stride=1, padding=2)
        self.fc = Linear(p2, k, rng, init="xavier")

    def forward(self, early: Tensor) -> Tensor:
        h = self.conv3.forward(self.conv2.forward(self.conv1.forward(early)))
        return ops.softmax(self.fc.forward(ops.global_avg_pool(h)))


class Subnetwork(Module):
    """Predictor (params beta) plus K independent extractor units (alpha)."""

    def __init__(self, name: str, k: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "k", k)
        w3 = cfg.widths[3]
        self.predictor = Predictor(cfg.widths[1], k, cfg, rng)
        self.units = ModuleList([BasicBlock(w3, w3, rng) for _ in range(k)])

    def extract(self, late: Tensor) -> List[Tensor]:
        return [unit.forward(late) for unit in self.units]


class Embedding(Module):
    """Pool the fused map, embed (first FC, ReLU), classify identities."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(cfg.widths[3], cfg.descriptor_dim, rng, init="he")
        self.fc2 = Linear(cfg.descriptor_dim, cfg.n_ids, rng, init="xavier")

    def forward(self, fused: Tensor) -> Tuple[Tensor, Tensor]:
        descriptor = ops.relu(self.fc1.forward(ops.global_avg_pool(fused)))
        return descriptor, self.fc2.forward(descriptor)


def fuse_attribute(f_list: Sequence[Tensor], w: Tensor) -> Tensor:
    """Probability-weighted sum of unit maps: sum_k w[:, k] * f_k."""
    if w.ndim != 2 or w.shape[1] != len(f_list):
        raise ShapeError(f"fuse_attribute: {len(f_list)} maps vs weights {w.shape}")
    out = ops.scale_map(f_list[0], ops.column(w, 0))
    for k in range(1, len(f_list)):
        out = ops.add_maps(out, ops.scale_map(f_list[k], ops.column(w, k)))
    return out


def fuse_all(maps: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of the per-attribute maps, exactly commutative."""
    return ops.sum_maps(maps)


class ReidNet(Module):
    """Backbone, three attribute subnetworks, and the embedding head."""

    def __init__(self, cfg: ModelConfig, seed: int):
        super().__init__()
        object.__setattr__(self, "cfg", cfg)
        rng = stream(seed, "model-init")
        self.backbone = Backbone(cfg, rng)
        self.sub_view = Subnetwork("view", ATTRIBUTE_K["view"], cfg, rng)
        self.sub_type = Subnetwork("type", ATTRIBUTE_K["type"], cfg, rng)
        self.sub_color = Subnetwork("color", ATTRIBUTE_K["color"], cfg, rng)
        self.embedding = Embedding(cfg, rng)

    def subnet(self, name: str) -> Subnetwork:
        return {"view": self.sub_view, "type": self.sub_type, "color": self.sub_color}[name]

    def forward(self, x: Tensor, enabled: Sequence[str] = ("view", "type", "color"),
                detach_weights: bool = False) -> Dict[str, object]:
        """Run the composition using the given attribute subnetworks.

        With no attributes enabled the late backbone map feeds the embedding
        directly (the baseline variant).
        """
        early, late = self.backbone.forward(x)
        weights: Dict[str, Tensor] = {}
        fused_parts: List[Tensor] = []
        for name in enabled:
            sub = self.subnet(name)
            w = sub.predictor.forward(early)
            weights[name] = w
            w_used = w.detach() if detach_weights else w
            fused_parts.append(fuse_attribute(sub.extract(late), w_used))
        fused = fuse_all(fused_parts) if fused_parts else late
        descriptor, id_logits = self.embedding.forward(fused)
        return {
            "weights": weights,
            "fused": fused,
            "descriptor": descriptor,
            "id_logits": id_logits,
        }

    def predict_attribute(self, x: Tensor, name: str) -> Tensor:
        """Probabilities w for one attribute only (predictor path alone)."""
        early, _ = self.backbone.forward(x)
        return self.subnet(name).predictor.forward(early)


def attribute_loss(w: Tensor, labels: Sequence[int], k: int) -> Tensor:
    return ops.cross_entropy(w, one_hot(labels, k))


def id_loss(id_logits: Tensor, labels: Sequence[int], n_ids: int) -> Tensor:
    return ops.cross_entropy(ops.softmax(id_logits), one_hot(labels, n_ids))


def extract_descriptors(model: ReidNet, images: np.ndarray,
                        enabled: Sequence[str] = ("view", "type", "color"),
                        batch: int = 32) -> np.ndarray:
    """Unit-normalized descriptors, eval-mode BN, no tape recording."""
    was_training = model.training
    model.eval()
    chunks = []
    try:
        for i in range(0, images.shape[0], batch):
            out = model.forward(Tensor(images[i : i + batch]), enabled=enabled)
            d = out["descriptor"].data
            norms = np.sqrt((d * d).sum(axis=1, keepdims=True))
            chunks.append(d / np.maximum(norms, 1e-12))
    finally:
        model.train(was_training)
    return np.concatenate(chunks, axis=0)
