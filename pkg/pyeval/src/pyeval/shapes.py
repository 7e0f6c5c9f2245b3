"""Synthetic colored-shapes segmentation data.

32x32 images holding a few bright squares and disks on a dark noisy
background.  Squares and disks share one color palette, so pixel color
separates shape from background but only local geometry separates the two
shape classes: 0 background, 1 square, 2 disk.
"""

from __future__ import annotations

import torch

IMAGE_SIZE = 32
NUM_CLASSES = 3

PALETTE = (
    (0.9, 0.2, 0.2),
    (0.2, 0.9, 0.2),
    (0.2, 0.4, 0.9),
    (0.9, 0.8, 0.2),
)


def _paint(image, labels, mask, color, label):
    for c in range(3):
        image[c][mask] = color[c]
    labels[mask] = label


def make_split(count: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns (images [count,3,32,32] float32, labels [count,32,32] int64)."""
    gen = torch.Generator().manual_seed(seed)
    size = IMAGE_SIZE
    ys, xs = torch.meshgrid(
        torch.arange(size).float(), torch.arange(size).float(), indexing="ij"
    )
    images = torch.empty(count, 3, size, size)
    labels = torch.zeros(count, size, size, dtype=torch.int64)
    for i in range(count):
        image = 0.12 + 0.05 * torch.randn(3, size, size, generator=gen)
        label = labels[i]
        for _ in range(int(torch.randint(2, 5, (1,), generator=gen))):
            kind = int(torch.randint(1, NUM_CLASSES, (1,), generator=gen))
            half = int(torch.randint(4, 8, (1,), generator=gen))
            cy = int(torch.randint(half, size - half, (1,), generator=gen))
            cx = int(torch.randint(half, size - half, (1,), generator=gen))
            color = PALETTE[int(torch.randint(0, len(PALETTE), (1,), generator=gen))]
            if kind == 1:
                mask = (abs(ys - cy) <= half) & (abs(xs - cx) <= half)
            else:
                mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= half**2
            _paint(image, label, mask, color, kind)
        image += 0.03 * torch.randn(3, size, size, generator=gen)
        images[i] = image.clamp(0.0, 1.0)
    return images, labels
