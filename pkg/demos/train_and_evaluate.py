"""Render a synthetic co-saliency set, train briefly, predict and score.

Each group holds one shape family (circles, squares, ...) drawn with random
position, scale, rotation and fill on a cluttered background that also holds
smaller shapes from other families. The model must mark only the family the
group has in common. This short run uses a narrow network and few epochs so it
finishes in a couple of minutes; the defaults in TrainConfig are the full
desk-scale settings.
"""

import sys
import tempfile
from pathlib import Path

from mccl.data import dataset_roots, load_dataset, split_holdout, synth_generate
from mccl.metrics import evaluate_maps
from mccl.train import TrainConfig, predict_groups, train_on_groups

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 150
work = Path(tempfile.mkdtemp(prefix="mccl-demo-"))

# 4 groups x 10 images; the last 2 of each group are held out
synth_generate(4, 10, 64, seed=0, out_dir=work / "data")
train_groups, test_groups = split_holdout(load_dataset(*dataset_roots(work / "data"), 64), 2)
print(f"data in {work / 'data'}: {[g.class_id for g in train_groups]}")

cfg = TrainConfig(epochs=epochs, lr_drop_epochs_from_end=max(1, epochs // 10), channels=(8, 16, 32, 64),
                  mcm_normalize=True)


def report(row, state):
    if row["epoch"] == 1 or row["epoch"] % 25 == 0:
        parts = "  ".join(f"{k} {v:7.3f}" for k, v in row.items() if k != "epoch")
        print(f"epoch {row['epoch']:3d}  {parts}")


result = train_on_groups(cfg, train_groups, work / "run", on_epoch=report)
print(f"trained in {result.seconds:.0f}s; checkpoint {result.checkpoint}")

preds = predict_groups(result.state.params, cfg.model, test_groups)
gts = {(g.class_id, s): gt[0] for g in test_groups for s, gt in zip(g.stems, g.gts)}
print()
print(evaluate_maps(preds, gts, dataset="held-out").table())
