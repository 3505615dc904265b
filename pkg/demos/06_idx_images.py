"""
Training on IDX image files
===========================

Write a tiny MNIST-style dataset in IDX format, load it back and train a
small convolutional network with AB phases on it.
"""

import tempfile
from pathlib import Path

import numpy as np

from ablab import data, training
from ablab.config import AbHyperparams, RunConfig

work = Path(tempfile.mkdtemp(prefix="ablab_idx_"))
rng = np.random.default_rng(0)

# Class k is a bright bar in row-block k plus noise
def make(n):
    labels = rng.integers(0, 4, n).astype(np.uint8)
    images = rng.integers(0, 60, size=(n, 8, 8)).astype(np.uint8)
    for i, k in enumerate(labels):
        images[i, 2 * k : 2 * k + 2, :] += 150
    return images, labels

for split, n in (("train", 1200), ("test", 300)):
    images, labels = make(n)
    data.write_idx(work / f"{split}-images.idx", images)
    data.write_idx(work / f"{split}-labels.idx", labels)

ds = data.load_idx_dataset(work / "train-images.idx", work / "train-labels.idx")
print("loaded", ds.inputs.shape, "classes", ds.num_classes)

cfg = RunConfig(
    model=[{"type": "conv2d", "in": 1, "out": 8, "kh": 3, "kw": 3}, {"type": "relu"}, {"type": "flatten"},
           {"type": "linear", "in": 8 * 8 * 8, "out": 4}],
    dataset={"kind": "idx", "train_images": str(work / "train-images.idx"),
             "train_labels": str(work / "train-labels.idx"), "test_images": str(work / "test-images.idx"),
             "test_labels": str(work / "test-labels.idx")},
    world_size=2, num_groups=2, local_batch_size=16,
    ab=AbHyperparams(total_training_steps=200, sigma_cutoff=0.1), eval_interval=50,
)
rep = training.run_training(cfg)
print(f"top-1 {100 * rep.final_top1:.1f}%  compression {rep.compression_ratio:.2f}:1")
print("ranks per decomposition:", [d.ranks for d in rep.decompositions[:2]])
