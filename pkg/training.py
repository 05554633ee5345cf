import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, validator
from torch import Tensor
from tqdm import tqdm

from errors import DataError, MissingInputError, StageError, TrainingDivergenceError
from model_zoo import ArchitectureSpec, ModelHandles, instantiate
from nn_utils import get_device, grl_warmup, iterate_batches, split_seed
from scoring import accuracy, predict_logits, top1
from sn_core import SNPattern, perturb_pattern, stamp_images

logger = logging.getLogger(__name__)

EPS = 1e-12
DEFAULT_EPOCHS = dict(
    mnist=dict(teacher=20, student=40),
    gtsrb=dict(teacher=40, student=80),
    pubfig=dict(teacher=40, student=80),
)
METRIC_COLUMNS = ["epoch", "loss_distill", "loss_sne", "acc_with_sn", "acc_without_sn"]


class TrainingConfig(BaseModel):
    optimizer: str = "adam"
    lr_initial: float = 0.001
    lr_patience: int = 3
    lr_min_delta: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    teacher_batch: int = 500
    student_batch: int = 1000
    grl_lambda: float = 1.0
    grl_warmup: bool = False
    distill_temperature: float = 1.0
    step_mode: str = "joint"
    sne_perturbed_fraction: float = 0.0
    epochs: int = 20
    seed: int = 0
    val_size: int = 5000
    test_batch_size: int = 1000
    device: int = -1

    @validator("optimizer")
    def check_optimizer(cls, v):
        if v != "adam":
            raise ValueError("only the adam optimizer is supported")
        return v

    @validator("grl_lambda")
    def check_lambda(cls, v):
        if v < 0:
            raise ValueError("grl_lambda must be >= 0")
        return v

    @validator("distill_temperature")
    def check_temperature(cls, v):
        if v <= 0:
            raise ValueError("distill_temperature must be > 0")
        return v

    @validator("step_mode")
    def check_step_mode(cls, v):
        if v not in ("joint", "alternate"):
            raise ValueError("step_mode must be joint or alternate")
        return v

    @validator("student_batch", "teacher_batch")
    def check_batch(cls, v):
        if v < 2:
            raise ValueError("batch sizes must be >= 2")
        return v

    @validator("sne_perturbed_fraction")
    def check_fraction(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("sne_perturbed_fraction must lie in [0, 1]")
        return v

    @property
    def raw_batch(self) -> int:
        return self.student_batch // 2

    @property
    def stamped_batch(self) -> int:
        return self.student_batch - self.raw_batch


class CheckpointManifest(BaseModel):
    stage: str  # teacher, in_training or packaged
    spec: ArchitectureSpec
    seed: int
    split_index: int
    grl_lambda: Optional[float] = None  # training-time bundles only
    config: dict = {}
    sn_record_hash: str = ""
    metrics: List[dict] = []


def save_checkpoint(handles: ModelHandles, manifest: CheckpointManifest, path: str):
    folder = Path(path)
    folder.mkdir(exist_ok=True, parents=True)
    state_dict = {k: v.detach().cpu() for k, v in handles.state_dict().items()}
    torch.save(state_dict, folder / "weights.pt")
    with open(folder / "manifest.json", "w") as f:
        f.write(manifest.json(indent=2, sort_keys=True) + "\n")
    print(dict(save=path))


def load_checkpoint(path: str, device: int = -1) -> Tuple[ModelHandles, CheckpointManifest]:
    folder = Path(path)
    missing = [p for p in (folder / "weights.pt", folder / "manifest.json") if not p.is_file()]
    if missing:
        raise MissingInputError(f"checkpoint incomplete: {', '.join(map(str, missing))}")
    with open(folder / "manifest.json") as f:
        manifest = CheckpointManifest(**json.load(f))
    handles = ModelHandles(
        manifest.spec,
        manifest.seed,
        with_auxiliary=manifest.stage == "in_training",
        grl_lambda=1.0 if manifest.grl_lambda is None else manifest.grl_lambda,
    )
    handles.load_state_dict(torch.load(folder / "weights.pt", map_location="cpu"))
    print(dict(load=path))
    return handles.to(get_device(device)), manifest


class TeacherModel:
    """Frozen teacher. Kept by the owner, never shipped to customers."""

    stage = "teacher"

    def __init__(self, handles: ModelHandles, metadata: Optional[dict] = None):
        self.handles = handles if handles.g_d is None else handles.strip_auxiliary()
        self.handles = self.handles.freeze()
        self.metadata = dict(metadata or {})

    @property
    def spec(self) -> ArchitectureSpec:
        return self.handles.spec

    @torch.no_grad()
    def probabilities(self, images: Tensor) -> Tensor:
        return torch.softmax(self.handles(images), dim=-1)

    def save(self, path: str):
        manifest = CheckpointManifest(
            stage=self.stage,
            spec=self.spec,
            seed=self.handles.seed,
            split_index=self.spec.split_index,
            config=self.metadata.get("config", {}),
            metrics=self.metadata.get("history", []),
        )
        save_checkpoint(self.handles, manifest, path)

    @classmethod
    def load(cls, path: str, device: int = -1):
        handles, manifest = load_checkpoint(path, device)
        if manifest.stage != cls.stage:
            raise StageError(f"{path} holds a {manifest.stage} checkpoint, not a teacher")
        return cls(handles, dict(config=manifest.config, history=manifest.metrics))


class StudentBundle:
    """Student model with its serial number reference.

    The pattern itself is not stored, only the hash of its certificate.
    """

    def __init__(
        self,
        handles: ModelHandles,
        sn_record_hash: str = "",
        stage: str = "in_training",
        metrics: Optional[List[dict]] = None,
        config: Optional[dict] = None,
    ):
        if stage not in ("in_training", "packaged"):
            raise StageError(f"unknown student stage {stage!r}")
        if stage == "packaged" and handles.g_d is not None:
            raise StageError("a packaged student cannot carry g_d")
        self.handles = handles
        self.sn_record_hash = sn_record_hash
        self.stage = stage
        self.metrics = list(metrics or [])
        self.config = dict(config or {})

    def manifest(self) -> CheckpointManifest:
        return CheckpointManifest(
            stage=self.stage,
            spec=self.handles.spec,
            seed=self.handles.seed,
            split_index=self.handles.spec.split_index,
            grl_lambda=self.handles.grl_lambda,
            config=self.config,
            sn_record_hash=self.sn_record_hash,
            metrics=self.metrics,
        )

    def save(self, path: str):
        save_checkpoint(self.handles, self.manifest(), path)

    @classmethod
    def load(cls, path: str, device: int = -1):
        handles, manifest = load_checkpoint(path, device)
        if manifest.stage not in ("in_training", "packaged"):
            raise StageError(f"{path} holds a {manifest.stage} checkpoint, not a student")
        if manifest.stage == "packaged":
            handles.eval()
        return cls(
            handles,
            sn_record_hash=manifest.sn_record_hash,
            stage=manifest.stage,
            metrics=manifest.metrics,
            config=manifest.config,
        )


def make_optimizer(handles: ModelHandles, config: TrainingConfig) -> torch.optim.Adam:
    """One Adam optimizer with a parameter group per branch (theta_e, theta_y, theta_d)."""
    groups = [
        dict(params=params, name=name)
        for name, params in handles.parameter_groups().items()
        if params
    ]
    return torch.optim.Adam(
        groups,
        lr=config.lr_initial,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_epsilon,
    )


def make_scheduler(optimizer, config: TrainingConfig):
    # divide by 10 once validation accuracy stalls for lr_patience epochs
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer,
        mode="max",
        factor=0.1,
        patience=config.lr_patience,
        threshold=config.lr_min_delta,
        threshold_mode="abs",
    )


def check_finite(loss: Tensor, epoch: int):
    if not torch.isfinite(loss).all():
        raise TrainingDivergenceError(epoch)


def train_teacher(dataset, spec: ArchitectureSpec, config: TrainingConfig) -> TeacherModel:
    """Cross-entropy training on raw images, reports the final validation accuracy."""
    h, w, c = spec.input_shape
    if tuple(dataset.image_shape) != (h, w, c) or dataset.num_classes != spec.num_classes:
        raise DataError(
            f"dataset {dataset.image_shape}/{dataset.num_classes} classes does not match "
            f"spec {spec.input_shape}/{spec.num_classes} classes"
        )
    logger.info("Teacher training starting...")
    device = get_device(config.device)
    handles = instantiate(spec, split_seed(config.seed, "init"), with_auxiliary=False).to(device)
    train_idx, val_idx = dataset.validation_split(config.val_size, split_seed(config.seed, "val"))
    val_x, val_y = dataset.train_images[val_idx], dataset.train_labels[val_idx]
    generator = torch.Generator().manual_seed(split_seed(config.seed, "shuffle"))

    optimizer = make_optimizer(handles, config)
    scheduler = make_scheduler(optimizer, config)
    history = []
    val_acc = accuracy(handles, val_x, val_y, batch_size=config.test_batch_size)

    for epoch in range(1, config.epochs + 1):
        handles.train()
        losses = []
        num_batches = math.ceil(len(train_idx) / config.teacher_batch)
        for idx in tqdm(
            iterate_batches(len(train_idx), config.teacher_batch, generator),
            total=num_batches,
            desc=f"teacher epoch {epoch}",
        ):
            x = dataset.train_images[train_idx[idx]].to(device)
            y = dataset.train_labels[train_idx[idx]].to(device)
            loss = F.cross_entropy(handles(x), y)
            check_finite(loss, epoch)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        val_acc = accuracy(handles, val_x, val_y, batch_size=config.test_batch_size)
        scheduler.step(val_acc)
        info = dict(
            epoch=epoch,
            loss=round(float(np.mean(losses)), 4),
            val_acc=round(val_acc, 2),
            lr=optimizer.param_groups[0]["lr"],
        )
        history.append(info)
        logger.info(str(info))

    logger.info(str(dict(teacher_val_acc=val_acc)))
    return TeacherModel(
        handles, dict(val_acc=val_acc, history=history, config=config.dict())
    )


def soften(probs: Tensor, temperature: float) -> Tensor:
    """Re-tempers probabilities: softmax(log p / T) equals softmax(z / T)."""
    if temperature == 1.0:
        return probs
    return torch.softmax(torch.log(probs.clamp_min(EPS)) / temperature, dim=-1)


def distill_loss(teacher_probs: Tensor, student_probs: Tensor, temperature: float = 1.0) -> Tensor:
    """KL(P_T || P_S) averaged over the batch, P_S clamped at 1e-12."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    p_t = soften(teacher_probs, temperature)
    p_s = soften(student_probs, temperature).clamp_min(EPS)
    kl = torch.xlogy(p_t, p_t) - p_t * torch.log(p_s)
    return kl.sum(dim=-1).mean()


def sne_loss(student: ModelHandles, raw_images: Tensor, labels: Tensor) -> Tensor:
    """Cross entropy of G_d(GRL(G_e(x))); theta_e receives the reversed gradient."""
    num_classes = student.spec.num_classes
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    return F.cross_entropy(student.logits(raw_images, "d"), labels)


def student_distill_loss(
    student: ModelHandles, teacher_probs: Tensor, stamped_images: Tensor, temperature: float
) -> Tensor:
    student_probs = torch.softmax(student.logits(stamped_images, "y"), dim=-1)
    return distill_loss(teacher_probs, student_probs, temperature)


def distill_step(student, optimizer, teacher_probs, stamped_images, temperature=1.0) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss = student_distill_loss(student, teacher_probs, stamped_images, temperature)
    loss.backward()
    optimizer.step()
    return loss.item()


def sne_step(student, optimizer, raw_images, labels) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss = sne_loss(student, raw_images, labels)
    loss.backward()
    optimizer.step()
    return loss.item()


def training_step(
    student: ModelHandles,
    optimizer,
    teacher_probs: Tensor,
    stamped_images: Tensor,
    raw_images: Tensor,
    raw_labels: Tensor,
    temperature: float = 1.0,
    step_mode: str = "joint",
    epoch: int = 0,
) -> Dict[str, float]:
    """One optimizer step over a stamped half (distill) and a raw half (SNE)."""
    if step_mode == "alternate":
        loss_distill = distill_step(student, optimizer, teacher_probs, stamped_images, temperature)
        loss_sne = sne_step(student, optimizer, raw_images, raw_labels)
        if not (math.isfinite(loss_distill) and math.isfinite(loss_sne)):
            raise TrainingDivergenceError(epoch)
        return dict(loss_distill=loss_distill, loss_sne=loss_sne)

    optimizer.zero_grad(set_to_none=True)
    l_distill = student_distill_loss(student, teacher_probs, stamped_images, temperature)
    l_sne = sne_loss(student, raw_images, raw_labels)
    loss = l_distill + l_sne
    check_finite(loss, epoch)
    loss.backward()
    optimizer.step()
    return dict(loss_distill=l_distill.item(), loss_sne=l_sne.item())


def perturb_some(
    images: Tensor, pattern: SNPattern, fraction: float, rng: np.random.Generator
) -> Tensor:
    """Stamps the leading `fraction` of the images with randomly perturbed patterns."""
    n = int(round(fraction * len(images)))
    if n == 0:
        return images
    images = images.clone()
    for i in range(n):
        n_flips = int(rng.integers(1, pattern.n_active + 1))
        wrong = perturb_pattern(pattern, n_flips, int(rng.integers(2 ** 31)))
        images[i : i + 1] = stamp_images(images[i : i + 1], wrong)
    return images


def train_student(
    teacher: TeacherModel,
    dataset,
    pattern: SNPattern,
    config: TrainingConfig,
    sn_record_hash: str = "",
) -> StudentBundle:
    """Distills the teacher into a student locked by `pattern`.

    Every step draws `stamped_batch` stamped samples for the distillation branch
    and `raw_batch` raw samples for the SN-embedding branch. Stamping happens on
    the fly.
    """
    h, w, _ = teacher.spec.input_shape
    pattern.check_fits(h, w)
    logger.info("Student training starting...")
    device = get_device(config.device)
    teacher.handles.to(device)
    student = instantiate(
        teacher.spec,
        split_seed(config.seed, "init"),
        with_auxiliary=True,
        grl_lambda=config.grl_lambda,
    ).to(device)

    train_idx, val_idx = dataset.validation_split(config.val_size, split_seed(config.seed, "val"))
    val_x, val_y = dataset.train_images[val_idx], dataset.train_labels[val_idx]
    gen_stamped = torch.Generator().manual_seed(split_seed(config.seed, "shuffle"))
    gen_raw = torch.Generator().manual_seed(split_seed(config.seed, "shuffle_raw"))
    rng = np.random.default_rng(split_seed(config.seed, "perturb"))

    optimizer = make_optimizer(student, config)
    scheduler = make_scheduler(optimizer, config)
    n = len(train_idx)
    steps_per_epoch = max(1, math.ceil(n / config.stamped_batch))
    total_steps = steps_per_epoch * max(config.epochs, 1)
    metrics = []

    for epoch in range(1, config.epochs + 1):
        student.train()
        stamped_order = torch.randperm(n, generator=gen_stamped)
        raw_order = torch.randperm(n, generator=gen_raw)
        epoch_losses = dict(loss_distill=[], loss_sne=[])

        for step in tqdm(range(steps_per_epoch), desc=f"student epoch {epoch}"):
            if config.grl_warmup:
                progress = ((epoch - 1) * steps_per_epoch + step) / total_steps
                student.grl_lambda = grl_warmup(config.grl_lambda, progress)

            s_idx = stamped_order[step * config.stamped_batch : (step + 1) * config.stamped_batch]
            r_idx = raw_order[step * config.raw_batch : (step + 1) * config.raw_batch]
            if len(r_idx) == 0:
                r_idx = raw_order[: config.raw_batch]

            x_clean = dataset.train_images[train_idx[s_idx]].to(device)
            teacher_probs = teacher.probabilities(x_clean)
            x_stamped = stamp_images(x_clean, pattern)
            x_raw = dataset.train_images[train_idx[r_idx]].to(device)
            y_raw = dataset.train_labels[train_idx[r_idx]].to(device)
            if config.sne_perturbed_fraction > 0:
                x_raw = perturb_some(x_raw, pattern, config.sne_perturbed_fraction, rng)

            losses = training_step(
                student,
                optimizer,
                teacher_probs,
                x_stamped,
                x_raw,
                y_raw,
                temperature=config.distill_temperature,
                step_mode=config.step_mode,
                epoch=epoch,
            )
            for k, v in losses.items():
                epoch_losses[k].append(v)

        acc_with_sn = accuracy(student, val_x, val_y, pattern, config.test_batch_size)
        acc_without_sn = accuracy(student, val_x, val_y, None, config.test_batch_size)
        scheduler.step(acc_with_sn)
        info = dict(
            epoch=epoch,
            loss_distill=round(float(np.mean(epoch_losses["loss_distill"])), 4),
            loss_sne=round(float(np.mean(epoch_losses["loss_sne"])), 4),
            acc_with_sn=round(acc_with_sn, 2),
            acc_without_sn=round(acc_without_sn, 2),
        )
        metrics.append(info)
        logger.info(str(dict(info, lr=optimizer.param_groups[0]["lr"])))

    student.grl_lambda = config.grl_lambda
    return StudentBundle(
        student,
        sn_record_hash=sn_record_hash,
        stage="in_training",
        metrics=metrics,
        config=config.dict(),
    )


def package_student(bundle: StudentBundle) -> StudentBundle:
    """Drops GRL and g_d; g_e and g_y weights are copied unchanged."""
    if bundle.stage != "in_training":
        raise StageError(f"cannot package a bundle in stage {bundle.stage!r}")
    handles = bundle.handles.strip_auxiliary().eval()
    return StudentBundle(
        handles,
        sn_record_hash=bundle.sn_record_hash,
        stage="packaged",
        metrics=bundle.metrics,
        config=bundle.config,
    )


def predict(
    bundle: StudentBundle,
    images: Tensor,
    pattern: Optional[SNPattern] = None,
    batch_size: int = 1000,
) -> Tuple[Tensor, Tensor]:
    """Labels and probabilities of a packaged student; stamps only when a pattern is given."""
    if bundle.stage != "packaged":
        raise StageError(f"predict needs a packaged bundle, got stage {bundle.stage!r}")
    logits = predict_logits(bundle.handles, images, pattern, batch_size)
    return top1(logits), torch.softmax(logits, dim=-1)


def write_metrics_csv(metrics: List[dict], path: str, columns=METRIC_COLUMNS):
    Path(path).parent.mkdir(exist_ok=True, parents=True)
    frame = pd.DataFrame(metrics, columns=columns)
    frame.to_csv(path, index=False)
    return frame
