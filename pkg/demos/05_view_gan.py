"""View-specified GAN: pair construction, a short adversarial run, and
synthesized target-view images appended to the manifest."""

import collections
import os

from vreid.dataset import generate_dataset
from vreid.gan import GanConfig, make_pairs, synthesize_augmentation, train_vsgan

OUT = os.path.join("demo_runs", "05_gan")
DATA = os.path.join(OUT, "data")

manifest = generate_dataset(DATA, n_identities=8, cameras_per_identity=2,
                            views_per_camera=3, seed=21)
train = manifest.subset("train")
views = collections.Counter(r.view for r in train)
src, dst = [v for v, _ in views.most_common(2)]
print(f"training views {dict(views)}; transferring {src} -> {dst}")

pairs = make_pairs(train, src, dst, seed=4, count=24)
with_truth = sum(p.target_truth is not None for p in pairs)
print(f"{len(pairs)} pairs, {with_truth} with same-identity ground truth")

cfg = GanConfig(batch_size=6, epochs=3, seed=2, widths=(4, 6, 8))
gen, disc, trace = train_vsgan(DATA, pairs, cfg, os.path.join(OUT, "run"))
for entry in trace:
    line = "  ".join(f"{k}={v:.4f}" for k, v in entry.items() if k != "epoch")
    print(f"epoch {entry['epoch']}: {line}")

extended = synthesize_augmentation(DATA, manifest, gen, src, dst, count=6, seed=5)
new = [r for r in extended.records if r.synthetic]
print(f"synthesized {len(new)} images:")
for r in new[:3]:
    print(f"  {r.path}  id={r.id} view={r.view} type={r.type} color={r.color}")
assert all(r.view == dst for r in new)
