from typing import Optional

import torch
from torch import Tensor

from errors import StageError
from sn_core import SNPattern, stamp_images


def safe_divide(a: float, b: float) -> float:
    if a == 0.0 or b == 0.0:
        return 0.0
    return a / b


@torch.no_grad()
def predict_logits(
    handles,
    images: Tensor,
    pattern: Optional[SNPattern] = None,
    batch_size: int = 1000,
    branch: str = "y",
) -> Tensor:
    """Logits of `branch` for every image, stamped first when a pattern is given."""
    was_training = handles.training
    handles.eval()
    device = handles.device
    outputs = []
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size]
        if pattern is not None:
            x = stamp_images(x, pattern)
        outputs.append(handles.logits(x.to(device), branch).cpu())
    handles.train(was_training)
    if not outputs:
        return torch.zeros(0, handles.spec.num_classes)
    return torch.cat(outputs)


def top1(logits: Tensor) -> Tensor:
    # torch.argmax returns the first maximal index, so ties go to the lowest class
    return torch.argmax(logits, dim=-1)


def accuracy(
    handles,
    images: Tensor,
    labels: Tensor,
    pattern: Optional[SNPattern] = None,
    batch_size: int = 1000,
    branch: str = "y",
) -> float:
    """Top-1 accuracy in percent."""
    preds = top1(predict_logits(handles, images, pattern, batch_size, branch))
    correct = (preds == labels.cpu()).sum().item()
    return 100.0 * safe_divide(correct, len(labels))


def evaluate(
    bundle,
    dataset,
    pattern: Optional[SNPattern] = None,
    split: str = "test",
    batch_size: int = 1000,
) -> float:
    """Accuracy of a packaged student (or a teacher) on a full split, stamped iff a pattern is given."""
    stage = getattr(bundle, "stage", "")
    if stage not in ("packaged", "teacher"):
        raise StageError(f"evaluate needs a packaged bundle, got stage {stage!r}")
    images, labels = dataset.split(split)
    return accuracy(bundle.handles, images, labels, pattern, batch_size)
