"""Golden-hash regressions for the backbone and extractor forward passes.

The hashes pin the exact float64 bit patterns produced by a fixed-seed
model on a fixed stream-drawn input. Any change to initialization, op
ordering, or numerics shows up as a hash mismatch. Regenerate the golden
file by deleting it and running this module directly.
"""

import hashlib
import json
import os

import numpy as np

from vreid.model import ModelConfig, ReidNet
from vreid.rng import stream
from vreid.tensor import Tensor

GOLDEN_PATH = os.path.join(os.path.dirname(__file__), "golden", "model_hashes.json")


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def compute_hashes() -> dict:
    cfg = ModelConfig(n_ids=5, widths=(4, 4, 6, 8), descriptor_dim=8,
                      predictor_widths=(4, 6, 6))
    model = ReidNet(cfg, seed=42).eval()
    x = Tensor(stream(123, "golden-input").random((2, 3, 64, 64)))
    early, late = model.backbone.forward(x)
    out = {
        "backbone.early": _sha(early.data),
        "backbone.late": _sha(late.data),
        "backbone.early.shape": list(early.data.shape),
        "backbone.late.shape": list(late.data.shape),
    }
    feats = model.subnet("type").extract(late)
    out["extractor.type"] = _sha(np.stack([f.data for f in feats]))
    out["extractor.type.count"] = len(feats)
    return out


def test_backbone_and_extractor_match_golden():
    with open(GOLDEN_PATH) as f:
        want = json.load(f)
    got = compute_hashes()
    assert got == want


if __name__ == "__main__":
    os.makedirs(os.path.dirname(GOLDEN_PATH), exist_ok=True)
    with open(GOLDEN_PATH, "w") as f:
        json.dump(compute_hashes(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {GOLDEN_PATH}")
