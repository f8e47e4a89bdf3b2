"""Learn prompt context tokens against frozen toy encoders and inspect the anchors.

The image and text encoders never change; only the shared context vectors are
optimized. We compare the learned anchors with the fixed "a photo of a [CLASS]"
prompt and save the frozen result.

    python3 demos/01_calibrate_anchors.py [out_dir]
"""

import sys
from pathlib import Path

from pand import Teacher, load_anchors, save_anchors, template_anchors, toy_config
from pand.eval import top1_accuracy
from pand.metrics import MetricsLog
from pand.train import build_encoders, calibrate, load_data

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

cfg = toy_config()
train, test = load_data(cfg)
pair = build_encoders(cfg, train.inputs().shape[1])
print(f"{len(train)} train / {len(test)} test samples, {len(train.vocab)} classes")
print(f"frozen encoder pair: {pair.parameter_count()} parameters, hash {pair.state_hash()[:12]}")

# A hand-written prompt gives a zero-shot baseline.
fixed = template_anchors(pair, train.vocab)
print(f"template prompt teacher top-1: {top1_accuracy(Teacher(pair, fixed), test):.1f}%")

log = MetricsLog(out / "psc.jsonl")
anchors, ctx = calibrate(cfg, train, pair, train.vocab, eval_split=test, log=log)
cal = log.series("calibration")
print(f"calibration loss {cal[0]:.3f} -> {cal[-1]:.3f} over {len(cal)} epochs")
print(f"learned prompt teacher top-1: {top1_accuracy(Teacher(pair, anchors), test):.1f}%")
print(f"encoder hash after calibration: {pair.state_hash()[:12]} (unchanged)")

save_anchors(anchors, out / "anchors.bin")
again = load_anchors(out / "anchors.bin")
print(f"saved {again.num_classes} x {again.dim} anchors, digest {again.digest()[:12]}")

# Cosine between the learned and template anchor of each class.
agree = (anchors.matrix * fixed.matrix).sum(1)
print("per-class cosine(learned, template):", " ".join(f"{v:.2f}" for v in agree.tolist()))
