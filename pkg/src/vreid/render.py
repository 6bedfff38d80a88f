"""Procedural vehicle sprites with structurally recoverable labels.

Every label is tied to a table the probe can read back: color_class picks a
palette anchor (body fill), type_class picks a proportion template (body
box height in pixels is unique per type), and the view is encoded by the
light blobs (two headlights = front, two taillights = rear, one of either
on the leading corner for the three-quarter views, none for side).

Illumination multiplies the whole frame by a scalar in [0.7, 1.3]; the
probe undoes it from the known background value, so recovery is exact on
every generated image, not only at unit illumination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelError
from .model import COLOR_CLASSES, TYPE_CLASSES, VIEW_CLASSES
from .rng import stream

IMAGE_SIZE = 64
SPRITE_BOX = 56
BG_VALUE = 0.15
SPECKLE_VALUE = 0.10
WINDOW_COLOR = (0.10, 0.12, 0.16)
WHEEL_COLOR = (0.04, 0.04, 0.04)
HEADLIGHT_COLOR = (0.76, 0.76, 0.60)
TAILLIGHT_COLOR = (0.50, 0.03, 0.03)

# RGB anchors, all <= 0.76 so illumination 1.3 never clips.
PALETTE = np.array([
    (0.74, 0.68, 0.10),  # yellow
    (0.72, 0.38, 0.05),  # orange
    (0.10, 0.52, 0.14),  # green
    (0.45, 0.46, 0.47),  # gray
    (0.68, 0.07, 0.09),  # red
    (0.10, 0.22, 0.62),  # blue
    (0.75, 0.75, 0.74),  # white
    (0.70, 0.55, 0.18),  # golden
    (0.36, 0.20, 0.09),  # brown
    (0.06, 0.06, 0.07),  # black
])

# (height, side length, frontal width) as fractions of SPRITE_BOX.
# Heights round to distinct pixel counts; that is what the type probe reads.
TYPE_TEMPLATES = np.array([
    (0.380, 0.80, 0.40),  # sedan
    (0.490, 0.78, 0.42),  # suv
    (0.560, 0.76, 0.42),  # van
    (0.420, 0.68, 0.38),  # hatchback
    (0.525, 0.82, 0.42),  # mpv
    (0.455, 0.86, 0.42),  # pickup
    (0.700, 0.92, 0.46),  # bus
    (0.630, 0.88, 0.46),  # truck
    (0.345, 0.86, 0.40),  # estate
])


@dataclass(frozen=True)
class VehicleSpec:
    identity: int
    type_class: int
    color_class: int
    texture_seed: int


@dataclass(frozen=True)
class CameraParams:
    illumination: float = 1.0
    background_seed: int = 0
    jitter: tuple = (0, 0)


def body_box(type_class: int, view_class: int) -> tuple:
    """(height, width) of the body rectangle in pixels."""
    h_frac, l_frac, w_frac = TYPE_TEMPLATES[type_class]
    bh = int(round(h_frac * SPRITE_BOX))
    view = VIEW_CLASSES[view_class]
    if view == "side":
        bw = int(round(l_frac * SPRITE_BOX))
    elif view in ("front", "rear"):
        bw = int(round(w_frac * SPRITE_BOX))
    else:
        bw = int(round((l_frac + w_frac) / 2 * SPRITE_BOX))
    return bh, bw


def _light_cells(x0: int, y0: int, bh: int, bw: int) -> tuple:
    c = max(3, int(round(0.12 * bw)))
    lh = max(2, int(round(0.10 * bh)))
    y1 = y0 + bh
    left = (slice(y1 - 1 - lh, y1 - 1), slice(x0 + 1, x0 + 1 + c))
    right = (slice(y1 - 1 - lh, y1 - 1), slice(x0 + bw - 1 - c, x0 + bw - 1))
    return left, right


def render_vehicle(spec: VehicleSpec, view_class: int, camera: CameraParams) -> np.ndarray:
    """Deterministic 64x64x3 float image in [0, 1]."""
    if not 0 <= view_class < len(VIEW_CLASSES):
        raise LabelError(f"view_class {view_class} outside [0, {len(VIEW_CLASSES)})")
    if not 0 <= spec.type_class < len(TYPE_CLASSES):
        raise LabelError(f"type_class {spec.type_class} outside [0, {len(TYPE_CLASSES)})")
    if not 0 <= spec.color_class < len(COLOR_CLASSES):
        raise LabelError(f"color_class {spec.color_class} outside [0, {len(COLOR_CLASSES)})")

    view = VIEW_CLASSES[view_class]
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), BG_VALUE)

    bg_rng = stream(camera.background_seed, "speckle")
    speckles = bg_rng.integers(0, IMAGE_SIZE, size=(80, 2))
    img[speckles[:, 0], speckles[:, 1]] = SPECKLE_VALUE

    bh, bw = body_box(spec.type_class, view_class)
    jx, jy = camera.jitter
    x0 = (IMAGE_SIZE - bw) // 2 + int(jx)
    y0 = (IMAGE_SIZE - bh) // 2 + int(jy)
    body = PALETTE[spec.color_class]
    img[y0 : y0 + bh, x0 : x0 + bw] = body

    # window band: offset encodes nothing, the light blobs carry the view
    wh = max(2, int(round(0.26 * bh)))
    wy = y0 + max(1, int(round(0.08 * bh)))
    if view in ("front", "rear"):
        wx0, wx1 = x0 + int(round(0.12 * bw)), x0 + int(round(0.88 * bw))
    elif view == "front_side":
        wx0, wx1 = x0 + int(round(0.10 * bw)), x0 + int(round(0.50 * bw))
    elif view == "rear_side":
        wx0, wx1 = x0 + int(round(0.50 * bw)), x0 + int(round(0.90 * bw))
    else:
        wx0, wx1 = x0 + int(round(0.30 * bw)), x0 + int(round(0.90 * bw))
    img[wy : wy + wh, wx0:wx1] = WINDOW_COLOR

    # wheels: inside the body rectangle (bbox stays the template box) and
    # clear of the light cells so the probe cells stay single-colored
    if view in ("side", "front_side", "rear_side"):
        wheel_h = max(2, int(round(0.16 * bh)))
        wheel_w = max(2, int(round(0.10 * bw)))
        wy1 = y0 + bh
        for fx in (0.20, 0.64):
            wx = x0 + int(round(fx * bw))
            img[wy1 - wheel_h : wy1, wx : wx + wheel_w] = WHEEL_COLOR
    else:
        bump_h = max(2, int(round(0.10 * bh)))
        img[y0 + bh - bump_h : y0 + bh, x0 + 1 : x0 + bw - 1] = WHEEL_COLOR

    # identity texture: up to two decal rectangles in the central body region
    tex_rng = stream(spec.texture_seed, "decal")
    shade = body * 0.55 if body.mean() > 0.2 else np.minimum(body * 3.0 + 0.12, 0.76)
    for _ in range(int(tex_rng.integers(1, 3))):
        dw = max(2, int(round(float(tex_rng.uniform(0.10, 0.22)) * bw)))
        dh = max(2, int(round(float(tex_rng.uniform(0.10, 0.18)) * bh)))
        dx = x0 + int(round(float(tex_rng.uniform(0.30, 0.68 - 0.22)) * bw))
        dy = y0 + int(round(float(tex_rng.uniform(0.38, 0.80 - 0.18)) * bh))
        img[dy : dy + dh, dx : dx + dw] = shade

    left, right = _light_cells(x0, y0, bh, bw)
    if view == "front":
        img[left] = HEADLIGHT_COLOR
        img[right] = HEADLIGHT_COLOR
    elif view == "rear":
        img[left] = TAILLIGHT_COLOR
        img[right] = TAILLIGHT_COLOR
    elif view == "front_side":
        img[left] = HEADLIGHT_COLOR
    elif view == "rear_side":
        img[right] = TAILLIGHT_COLOR

    return img * camera.illumination


def _classify_cell(cell: np.ndarray, body: np.ndarray) -> str:
    mean = cell.reshape(-1, 3).mean(axis=0)
    if np.abs(mean - body).max() < 0.06:
        return "body"
    if mean[0] > 0.30 and mean[1] < 0.12 and mean[2] < 0.12:
        return "tail"
    if mean.sum() > 1.6:
        return "head"
    return "other"


def probe_labels(image: np.ndarray) -> tuple:
    """(view_class, type_class, color_class) read back from a rendered image.

    Undoes illumination using corner background patches, finds the body
    bounding box, matches its height against the template table, classifies
    the two lower light cells, and matches the body median color against
    the palette.
    """
    corners = np.concatenate([
        image[:4, :4].reshape(-1, 3), image[:4, -4:].reshape(-1, 3),
        image[-4:, :4].reshape(-1, 3), image[-4:, -4:].reshape(-1, 3),
    ])
    illum = np.median(corners) / BG_VALUE
    norm = image / illum

    is_bg = np.abs(norm - BG_VALUE).max(axis=2) < 0.02
    is_speckle = np.abs(norm - SPECKLE_VALUE).max(axis=2) < 0.02
    mask = ~(is_bg | is_speckle)
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
    bh, bw = y1 - y0 + 1, x1 - x0 + 1

    body = np.median(norm[mask], axis=0)
    color_class = int(np.argmin(np.abs(PALETTE - body).max(axis=1)))

    left, right = _light_cells(x0, y0, bh, bw)
    kinds = (_classify_cell(norm[left], body), _classify_cell(norm[right], body))
    if kinds == ("head", "head"):
        view_class = VIEW_CLASSES.index("front")
    elif kinds == ("tail", "tail"):
        view_class = VIEW_CLASSES.index("rear")
    elif kinds[0] == "head":
        view_class = VIEW_CLASSES.index("front_side")
    elif kinds[1] == "tail":
        view_class = VIEW_CLASSES.index("rear_side")
    else:
        view_class = VIEW_CLASSES.index("side")

    heights = [body_box(tc, view_class)[0] for tc in range(len(TYPE_CLASSES))]
    type_class = int(np.argmin([abs(bh - h) for h in heights]))
    return view_class, type_class, color_class
