"""Dataset generation, on-disk format, and training-time augmentation.

Layout: ``manifest.jsonl`` (one JSON record per line, after a schema
header line) plus ``images/%08d.ppm`` binary P6 files. Generated GAN
images land in the same directory as ``images/gen_%08d.ppm``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ManifestError
from .render import IMAGE_SIZE, CameraParams, VehicleSpec, render_vehicle
from .rng import stream

SCHEMA_VERSION = 1
RECORD_FIELDS = ("path", "id", "camera", "view", "type", "color", "split", "synthetic")


# ---------------------------------------------------------------------------
# PPM I/O


def write_ppm(path: str, image: np.ndarray) -> None:
    """Save an HxWx3 float image in [0, 1] as binary 8-bit P6."""
    h, w, _ = image.shape
    data = np.rint(image * 255.0).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ManifestError(f"{path}: not a P6 file (magic {magic!r})")
        dims = f.readline().split()
        maxval = f.readline().strip()
        if len(dims) != 2 or maxval != b"255":
            raise ManifestError(f"{path}: malformed PPM header")
        w, h = int(dims[0]), int(dims[1])
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ManifestError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3) / 255.0


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Record:
    path: str
    id: int
    camera: int
    view: int
    type: int
    color: int
    split: str
    synthetic: bool


@dataclass
class Manifest:
    records: List[Record] = field(default_factory=list)
    schema: int = SCHEMA_VERSION

    def subset(self, split: str) -> List[Record]:
        return [r for r in self.records if r.split == split]

    def identities(self, split: Optional[str] = None) -> List[int]:
        recs = self.records if split is None else self.subset(split)
        return sorted({r.id for r in recs})


def save_manifest(manifest: Manifest, path: str) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"schema": manifest.schema}) + "\n")
        for r in manifest.records:
            f.write(json.dumps({k: getattr(r, k) for k in RECORD_FIELDS}) + "\n")


def load_manifest(path: str) -> Manifest:
    records = []
    with open(path) as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:1: bad schema header: {e}") from e
        if not isinstance(header, dict) or "schema" not in header:
            raise ManifestError(f"{path}:1: missing 'schema' field")
        if header["schema"] != SCHEMA_VERSION:
            raise ManifestError(f"{path}:1: schema {header['schema']}, expected {SCHEMA_VERSION}")
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: bad JSON: {e}") from e
            for k in RECORD_FIELDS:
                if k not in obj:
                    raise ManifestError(f"{path}:{lineno}: missing field '{k}'")
            records.append(Record(**{k: obj[k] for k in RECORD_FIELDS}))
    return Manifest(records=records, schema=SCHEMA_VERSION)


def load_images(manifest_dir: str, records: Sequence[Record]) -> np.ndarray:
    """Images for the records as Nx3xHxW float arrays in [0, 1]."""
    out = np.empty((len(records), 3, IMAGE_SIZE, IMAGE_SIZE))
    for i, r in enumerate(records):
        img = read_ppm(os.path.join(manifest_dir, r.path))
        out[i] = img.transpose(2, 0, 1)
    return out


# ---------------------------------------------------------------------------
# generation


def _balanced_classes(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    vals = np.array([i % k for i in range(n)])
    rng.shuffle(vals)
    return vals


def generate_dataset(out_dir: str, n_identities: int, cameras_per_identity: int,
                     views_per_camera: int, seed: int,
                     train_fraction: float = 0.75) -> Manifest:
    """Render the corpus and write manifest plus images under out_dir.

    Every identity is observed by every camera; each camera has a dominant
    view rendered for 80% of its shots (the first shot always, the rest
    with the probability that makes the overall rate 0.8).
    """
    if n_identities < 2:
        raise ConfigError(f"need at least 2 identities, got {n_identities}")
    if cameras_per_identity < 1 or views_per_camera < 1:
        raise ConfigError("camera and view counts must be positive")
    n_train = int(round(n_identities * train_fraction))
    if n_train < 1 or n_train >= n_identities:
        raise ConfigError(
            f"train_fraction {train_fraction} leaves no usable split for {n_identities} identities")

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    types = _balanced_classes(n_identities, 9, stream(seed, "types"))
    colors = _balanced_classes(n_identities, 10, stream(seed, "colors"))
    id_order = stream(seed, "split").permutation(n_identities)
    train_ids = set(int(i) for i in id_order[:n_train])

    dominant = {c: int(stream(seed, "camera-view", c).integers(0, 5))
                for c in range(cameras_per_identity)}
    v = views_per_camera
    p_dom = 1.0 if v == 1 else (0.8 * v - 1.0) / (v - 1.0)

    records: List[Record] = []
    index = 0
    for ident in range(n_identities):
        spec = VehicleSpec(identity=ident, type_class=int(types[ident]),
                           color_class=int(colors[ident]),
                           texture_seed=seed * 1_000_003 + ident)
        for cam in range(cameras_per_identity):
            illum = float(stream(seed, "illum", cam).uniform(0.7, 1.3))
            for slot in range(v):
                shot_rng = stream(seed, "shot", ident, cam, slot)
                if slot == 0 or shot_rng.uniform() < p_dom:
                    view = dominant[cam]
                else:
                    others = [w for w in range(5) if w != dominant[cam]]
                    view = int(others[shot_rng.integers(0, len(others))])
                jitter = tuple(int(j) for j in shot_rng.integers(-2, 3, size=2))
                cam_params = CameraParams(illumination=illum,
                                          background_seed=seed * 7 + index,
                                          jitter=jitter)
                img = render_vehicle(spec, view, cam_params)
                rel = f"images/{index:08d}.ppm"
                write_ppm(os.path.join(out_dir, rel), img)
                if ident in train_ids:
                    split = "train"
                elif slot == 0 and cam < cameras_per_identity - 1:
                    split = "query"
                else:
                    split = "gallery"
                records.append(Record(path=rel, id=ident, camera=cam, view=view,
                                      type=int(types[ident]), color=int(colors[ident]),
                                      split=split, synthetic=False))
                index += 1

    manifest = Manifest(records=records)
    save_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    return manifest


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    resize_w: float = 1.05
    resize_h: float = 1.10
    crop_w: int = IMAGE_SIZE
    crop_h: int = IMAGE_SIZE
    flip_prob: float = 0.5
    center_crop: bool = False


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    """Mirror a CxHxW image along its width axis."""
    return image[:, :, ::-1].copy()


def resize_nearest(image: np.ndarray, h: int, w: int) -> np.ndarray:
    _, ih, iw = image.shape
    ys = (np.arange(h) * ih // h).clip(0, ih - 1)
    xs = (np.arange(w) * iw // w).clip(0, iw - 1)
    return image[:, ys[:, None], xs[None, :]]


def augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Resize to (1.05W, 1.1H), crop back to (W, H), flip with prob 0.5."""
    _, ih, iw = image.shape
    rh, rw = int(round(ih * cfg.resize_h)), int(round(iw * cfg.resize_w))
    if cfg.crop_h > rh or cfg.crop_w > rw:
        raise ConfigError(f"crop {cfg.crop_w}x{cfg.crop_h} exceeds resized {rw}x{rh}")
    big = resize_nearest(image, rh, rw)
    if cfg.center_crop:
        dy, dx = (rh - cfg.crop_h) // 2, (rw - cfg.crop_w) // 2
    else:
        dy = int(rng.integers(0, rh - cfg.crop_h + 1))
        dx = int(rng.integers(0, rw - cfg.crop_w + 1))
    out = big[:, dy : dy + cfg.crop_h, dx : dx + cfg.crop_w]
    if cfg.flip_prob > 0 and rng.uniform() < cfg.flip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)
