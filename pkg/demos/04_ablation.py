"""Component ablation: template vs learned anchors, with and without the structural term.

At toy scale the accuracy ordering between rows is noisy and not meaningful;
the consistency column shows what the structural term changes.

    python3 demos/04_ablation.py [out_dir]
"""

import sys
from pathlib import Path

from pand import toy_config
from pand.eval import run_ablation
from pand.train import load_data

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

cfg = toy_config()
train, test = load_data(cfg)
table = run_ablation(cfg, train, test, workers=2)
print(table.to_text())
table.write(out / "ablation.csv")
print(f"template anchors {table.metadata['template_anchors'][:12]}, "
      f"learned anchors {table.metadata['learned_anchors'][:12]}")
