"""Distill a small MLP student from the calibrated teacher.

Runs both stages end to end, prints the per-epoch loss breakdown, and reloads
the checkpoint to confirm it reproduces the trained student.

    python3 demos/02_distill_student.py [out_dir]
"""

import sys
from pathlib import Path

import torch

from pand import load_checkpoint, run_pipeline, toy_config
from pand.eval import neighborhood_consistency, top1_accuracy
from pand.train import load_data

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
cfg = toy_config(paths__checkpoints=str(out / "ckpt"), paths__metrics=str(out / "run.jsonl"))
train, test = load_data(cfg)
result = run_pipeline(cfg, (train, test))

print("epoch   lr        cls     vis     txt     nsd      total   top1")
for r in result.log.stage("nsd")[::10] + result.log.stage("nsd")[-1:]:
    print(f"{r['epoch']:5d}  {r['lr']:.2e}  {r['cls']:.4f}  {r['vis']:.4f}  {r['txt']:.4f}  "
          f"{r['nsd']:.5f}  {r['total']:.4f}  {r['top1']:.1f}")

teacher, student = result.teacher, result.student
print(f"teacher top-1 {top1_accuracy(teacher, test):.1f}%, student top-1 {top1_accuracy(student, test):.1f}%")
print(f"student {student.parameter_count()} params vs teacher encoders {teacher.pair.parameter_count()}")
print(f"neighborhood consistency (mean JS, test): {neighborhood_consistency(teacher, student, test):.6f}")

ck = load_checkpoint(out / "ckpt" / "student.ckpt")
same = torch.equal(ck.build_model()(test.inputs()).logits, student(test.inputs()).logits)
print(f"checkpoint {ck.content_hash[:12]} reproduces the student: {same}")
