"""Export teacher and student embeddings for an external viewer, then compare them.

Each file has a header "N d" followed by "id<TAB>label<TAB>values" lines.

    python3 demos/05_export_embeddings.py [out_dir]
"""

import sys
from pathlib import Path

import torch
import torch.nn.functional as F

from pand import run_pipeline, toy_config
from pand.eval import export_embeddings, read_embeddings
from pand.train import load_data

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

cfg = toy_config()
train, test = load_data(cfg)
result = run_pipeline(cfg, (train, test))

export_embeddings(result.teacher, test, out / "teacher.tsv")
export_embeddings(result.student, test, out / "student.tsv", which="projected")
_, labels, t = read_embeddings(out / "teacher.tsv")
_, _, s = read_embeddings(out / "student.tsv")
print(f"wrote {t.shape[0]} x {t.shape[1]} embeddings for teacher and student")

# Mean cosine between each sample's student projection and teacher feature.
print(f"mean cosine(student, teacher): {float(F.cosine_similarity(s, t).mean()):.4f}")

# Class-centroid similarity structure of the two spaces.
y = torch.tensor(labels)
cent = lambda m: F.normalize(torch.stack([m[y == c].mean(0) for c in range(10)]), dim=1)  # noqa: E731
gap = (cent(t) @ cent(t).T - cent(s) @ cent(s).T).abs().max()
print(f"largest centroid-similarity gap between spaces: {float(gap):.4f}")
