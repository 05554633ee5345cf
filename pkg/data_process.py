import logging
from pathlib import Path
from typing import Optional, Tuple

import fire
import numpy as np
import torch
from pydantic import BaseModel, root_validator
from torch import Tensor
from torchvision import datasets, transforms
from tqdm import tqdm

from errors import DataError, DataIngestionError, UnknownArchitectureError

logger = logging.getLogger(__name__)

IMAGE_SIZES = dict(mnist=(28, 28), gtsrb=(32, 32), pubfig=(224, 224))
NUM_CLASSES = dict(mnist=10, gtsrb=43, pubfig=83)


class DatasetHandle(BaseModel):
    """Normalized image classification data, images stored as [N, C, H, W] floats in [0, 1]."""

    name: str
    train_images: Tensor
    train_labels: Tensor
    test_images: Tensor
    test_labels: Tensor
    num_classes: int
    image_shape: Tuple[int, int, int]  # (H, W, C)

    class Config:
        arbitrary_types_allowed = True

    @root_validator(skip_on_failure=True)
    def check_data(cls, values):
        h, w, c = values["image_shape"]
        for split in ("train", "test"):
            images = values[f"{split}_images"]
            labels = values[f"{split}_labels"]
            if images.dim() != 4 or tuple(images.shape[1:]) != (c, h, w):
                raise ValueError(f"{split} images must be [N, {c}, {h}, {w}]")
            if len(images) != len(labels):
                raise ValueError(f"{split} images and labels differ in length")
            if images.numel() and (images.min() < 0 or images.max() > 1):
                raise ValueError(f"{split} pixels must lie in [0, 1]")
            if labels.numel() and (
                labels.min() < 0 or labels.max() >= values["num_classes"]
            ):
                raise ValueError(f"{split} labels must lie in [0, num_classes)")
        return values

    @classmethod
    def from_arrays(
        cls,
        name: str,
        train_images,
        train_labels,
        test_images,
        test_labels,
        num_classes: Optional[int] = None,
        seed: Optional[int] = None,
    ):
        """Builds a handle from [N, H, W, C] (or [N, H, W]) arrays, uint8 or floats in [0, 1]."""
        train_x, test_x = to_nchw(train_images), to_nchw(test_images)
        train_y = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
        test_y = torch.as_tensor(np.asarray(test_labels), dtype=torch.long)
        if seed is not None:
            order = torch.randperm(len(train_x), generator=torch.Generator().manual_seed(seed))
            train_x, train_y = train_x[order], train_y[order]
        if num_classes is None:
            num_classes = int(max(train_y.max().item(), test_y.max().item())) + 1
        _, c, h, w = train_x.shape
        try:
            return cls(
                name=name,
                train_images=train_x,
                train_labels=train_y,
                test_images=test_x,
                test_labels=test_y,
                num_classes=num_classes,
                image_shape=(h, w, c),
            )
        except ValueError as e:
            raise DataError(str(e))

    @property
    def pixel_range(self) -> Tuple[float, float]:
        lo = min(self.train_images.min().item(), self.test_images.min().item())
        hi = max(self.train_images.max().item(), self.test_images.max().item())
        return lo, hi

    def split(self, name: str) -> Tuple[Tensor, Tensor]:
        if name == "train":
            return self.train_images, self.train_labels
        if name == "test":
            return self.test_images, self.test_labels
        raise DataError(f"unknown split {name!r}")

    def validation_split(self, val_size: int, seed: int) -> Tuple[Tensor, Tensor]:
        """Seeded (train, validation) index split of the train split."""
        n = len(self.train_labels)
        order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
        val_size = min(max(val_size, 0), n - 1)
        if val_size == 0:
            return order, order
        return order[val_size:], order[:val_size]

    def subset(self, indices, name: str = ""):
        """Handle whose train split holds only `indices`; the test split is shared."""
        indices = torch.as_tensor(indices, dtype=torch.long)
        if len(indices) == 0:
            raise DataError("subset is empty")
        return DatasetHandle(
            name=name or self.name,
            train_images=self.train_images[indices],
            train_labels=self.train_labels[indices],
            test_images=self.test_images,
            test_labels=self.test_labels,
            num_classes=self.num_classes,
            image_shape=self.image_shape,
        )


def to_nchw(images) -> Tensor:
    x = torch.as_tensor(np.asarray(images))
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    else:
        x = x.float()
    if x.dim() == 3:
        x = x.unsqueeze(-1)
    return x.permute(0, 3, 1, 2).contiguous()


def expected_files(name: str, root: str):
    root = Path(root)
    if name == "mnist":
        raw = root / "MNIST" / "raw"
        return [
            raw / f
            for f in [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ]
        ]
    if name == "gtsrb":
        base = root / "gtsrb" / "GTSRB"
        return [base / "Training", base / "Final_Test" / "Images", root / "gtsrb" / "GT-final_test.csv"]
    if name == "pubfig":
        return [root / "pubfig" / "train", root / "pubfig" / "test"]
    raise UnknownArchitectureError(f"unknown dataset {name!r}")


def read_image_dataset(dataset, desc: str) -> Tuple[Tensor, Tensor]:
    images, labels = [], []
    for image, label in tqdm(dataset, desc=desc):
        images.append(image)
        labels.append(label)
    x = torch.stack(images).float() / 255.0
    return x, torch.as_tensor(labels, dtype=torch.long)


def load_dataset(name: str, root_path: str, seed: int = 0) -> DatasetHandle:
    """Reads a dataset from disk (never from the network) and normalizes it to [0, 1].

    GTSRB and Pubfig images are resized with bilinear interpolation.
    """
    name = name.lower()
    paths = expected_files(name, root_path)
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise DataIngestionError(f"{name} files missing under {root_path}", missing)

    try:
        if name == "mnist":
            splits = [datasets.MNIST(root_path, train=t, download=False) for t in (True, False)]
            (train_x, train_y), (test_x, test_y) = [
                (d.data.unsqueeze(1).float() / 255.0, d.targets.long()) for d in splits
            ]
        else:
            resize = transforms.Compose(
                [
                    transforms.Resize(
                        IMAGE_SIZES[name], interpolation=transforms.InterpolationMode.BILINEAR
                    ),
                    transforms.PILToTensor(),
                ]
            )
            if name == "gtsrb":
                train = datasets.GTSRB(root_path, split="train", transform=resize)
                test = datasets.GTSRB(root_path, split="test", transform=resize)
            else:
                folder = Path(root_path) / "pubfig"
                train = datasets.ImageFolder(str(folder / "train"), transform=resize)
                test = datasets.ImageFolder(str(folder / "test"), transform=resize)
            train_x, train_y = read_image_dataset(train, f"{name} train")
            test_x, test_y = read_image_dataset(test, f"{name} test")
    except (RuntimeError, OSError, ValueError) as e:
        raise DataIngestionError(f"cannot read {name}: {e}", paths)

    order = torch.randperm(len(train_x), generator=torch.Generator().manual_seed(seed))
    _, c, h, w = train_x.shape
    data = DatasetHandle(
        name=name,
        train_images=train_x[order],
        train_labels=train_y[order],
        test_images=test_x,
        test_labels=test_y,
        num_classes=NUM_CLASSES[name],
        image_shape=(h, w, c),
    )
    logger.info(
        str(
            dict(
                dataset=name,
                train=len(data.train_labels),
                test=len(data.test_labels),
                shape=data.image_shape,
                pixel_range=data.pixel_range,
            )
        )
    )
    return data


def fetch_data(name: str, root_path: str = "data"):
    """Downloads a public dataset archive into root_path."""
    name = name.lower()
    if name == "mnist":
        for train in (True, False):
            datasets.MNIST(root_path, train=train, download=True)
    elif name == "gtsrb":
        for split in ("train", "test"):
            datasets.GTSRB(root_path, split=split, download=True)
    elif name == "pubfig":
        raise DataIngestionError(
            "pubfig has no public archive to fetch; place ImageFolder splits at",
            expected_files(name, root_path),
        )
    else:
        raise UnknownArchitectureError(f"unknown dataset {name!r}")
    print(dict(fetched=name, root=root_path))


def test_data(name: str = "mnist", root_path: str = "data"):
    data = load_dataset(name, root_path)
    print(dict(name=data.name, shape=data.image_shape, classes=data.num_classes))
    print(dict(train=len(data.train_labels), test=len(data.test_labels)))
    print(dict(pixel_range=data.pixel_range))


"""
p data_process.py fetch_data mnist data/
p data_process.py test_data mnist data/
"""


if __name__ == "__main__":
    fire.Fire()
