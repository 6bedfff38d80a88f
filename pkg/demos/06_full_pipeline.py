"""The whole pipeline through the CLI: generate, train, eval, report."""

import json
import os

from vreid.cli import main

ROOT = os.path.join("demo_runs", "06_pipeline")
os.makedirs(ROOT, exist_ok=True)

CONFIG = f"""
seed = 11

[dataset]
dir = "{ROOT}/data"
identities = 8
cameras = 2
views = 2

[model]
widths = [4, 4, 6, 8]
descriptor_dim = 16
predictor_widths = [4, 6, 6]

[train]
run_dir = "{ROOT}/train"
batch_size = 4
epochs_view = 1
epochs_type = 1
epochs_color = 1
epochs_joint = 2

[eval]
protocol = "VERI"
out = "{ROOT}/eval.json"
"""

cfg_path = os.path.join(ROOT, "run.toml")
with open(cfg_path, "w") as f:
    f.write(CONFIG)

for argv in (["gen-data", "--config", cfg_path],
             ["train", "--config", cfg_path, "--phase", "all"],
             ["eval", "--config", cfg_path],
             ["report", "--eval-json", f"{ROOT}/eval.json", "--top-k", "5"]):
    print(f"$ vreid {' '.join(argv)}")
    code = main(argv)
    assert code == 0, f"exit {code}"

with open(f"{ROOT}/eval.json") as f:
    report = json.load(f)
print(f"mAP {report['map']:.4f}  rank-1 {report['cmc'][0]:.4f}  "
      f"rank-5 {report['cmc'][4]:.4f}  queries {report['n_queries']}")
print(f"ranking grids under {ROOT}/eval_rankings/")
