"""Train a genotype on the shapes task and score it.

Deliberately small: 16 training images, a few hundred Adam steps, metrics
on a fresh holdout split.  Good enough to rank architectures, fast enough
to run inside a test suite.
"""

from __future__ import annotations

import torch

from .metrics import confusion_matrix, segmentation_metrics
from .net import ToyNet
from .shapes import NUM_CLASSES, make_split

TRAIN_IMAGES = 16
HOLDOUT_IMAGES = 8
BATCH = 8
LEARNING_RATE = 3e-3


def train_and_score(genotype: dict, seed: int, steps: int) -> tuple[float, float, float]:
    """(miou, mean_acc, fw_iou) for the genotype after ``steps`` updates."""
    torch.manual_seed(seed)
    model = ToyNet(genotype, NUM_CLASSES)
    images, labels = make_split(TRAIN_IMAGES, seed)
    holdout, holdout_labels = make_split(HOLDOUT_IMAGES, seed + 1)

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=LEARNING_RATE)
    loss_fn = torch.nn.CrossEntropyLoss()
    batches = TRAIN_IMAGES // BATCH
    model.train()
    for step in range(steps):
        lo = (step % batches) * BATCH
        batch = images[lo : lo + BATCH]
        target = labels[lo : lo + BATCH]
        optimizer.zero_grad()
        loss = loss_fn(model(batch), target)
        loss.backward()
        optimizer.step()

    model.eval()
    with torch.no_grad():
        prediction = model(holdout).argmax(dim=1)
    counts = confusion_matrix(
        holdout_labels.flatten().tolist(),
        prediction.flatten().tolist(),
        NUM_CLASSES,
    )
    return segmentation_metrics(counts)
