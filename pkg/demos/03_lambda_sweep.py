"""Sweep the structural-loss weight with everything else held fixed.

All rows share one set of calibrated anchors and the same student seed, so the
only difference between rows is lambda_nsd. The lambda = 0 row is the plain
global-alignment baseline.

    python3 demos/03_lambda_sweep.py [out_dir]
"""

import sys
from pathlib import Path

from pand import toy_config
from pand.eval import run_sweep
from pand.train import load_data

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

cfg = toy_config()
train, test = load_data(cfg)
table = run_sweep(cfg, [0.0, 0.25, 0.5, 0.75, 1.0], train, test, workers=2)
print(table.to_text())
table.write(out / "sweep.csv")

# Lower consistency means the student's confusion structure tracks the teacher's.
rows = sorted(table.rows, key=lambda r: r.extra["lambda_nsd"])
for r in rows:
    bar = "#" * int(round(r.extra["consistency"] * 4e4))
    print(f"lambda {r.extra['lambda_nsd']:<4g} consistency {r.extra['consistency']:.2e} {bar}")
