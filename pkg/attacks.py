import copy
import json
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
import torch.nn.utils.prune as prune
from pydantic import BaseModel, validator
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from analysis import extract_features, linear_probe
from errors import ArgumentError, DataError, StageError
from model_zoo import ArchitectureSpec, ModelHandles, instantiate, replace_dense_layers
from nn_utils import get_device, split_seed
from scoring import accuracy
from sn_core import SNPattern, stamp_images
from training import StudentBundle, check_finite, sne_loss

logger = logging.getLogger(__name__)

FRACTIONS = [0.1, 0.2, 0.3, 0.4]
PRUNE_RATIOS = [0.1, 0.2, 0.3, 0.4]
TRAJECTORY_COLUMNS = ["epoch", "step_count", "acc_raw", "acc_orig_sn", "acc_new_sn"]


class AttackConfig(BaseModel):
    attack_kind: str
    data_fraction: float = 0.1
    prune_ratio: float = 0.1
    epochs: int = 20
    lr: float = 0.001
    batch_size: int = 500
    seed: int = 0
    grl_lambda: float = 1.0
    overwrite_mode: str = "three_branch"
    eval_every_steps: int = 0
    test_batch_size: int = 1000
    device: int = -1

    @validator("attack_kind")
    def check_kind(cls, v):
        kinds = ["finetune", "prune", "transfer", "overwrite", "scratch_baseline"]
        if v not in kinds:
            raise ValueError(f"attack_kind must be one of {kinds}")
        return v

    @validator("data_fraction")
    def check_fraction(cls, v):
        if not 0 < v <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")
        return v

    @validator("prune_ratio")
    def check_ratio(cls, v):
        if not 0 < v < 1:
            raise ValueError("prune_ratio must lie in (0, 1)")
        return v

    @validator("overwrite_mode")
    def check_mode(cls, v):
        if v not in ("three_branch", "two_branch"):
            raise ValueError("overwrite_mode must be three_branch or two_branch")
        return v

    @validator("epochs", "eval_every_steps")
    def check_non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v


class AttackOutcome(BaseModel):
    attack_kind: str
    dataset: str = ""
    fraction: Optional[float] = None
    ratio: Optional[float] = None
    seed: int = 0
    trajectory: List[dict] = []  # one row per epoch
    curve: List[dict] = []  # (step, epoch, acc) every eval_every_steps
    step_count: int = 0
    final_metrics: dict = {}
    checkpoint: str = ""
    bundle: Optional[StudentBundle] = None

    class Config:
        arbitrary_types_allowed = True

    def summary(self) -> dict:
        info = dict(
            attack_kind=self.attack_kind,
            dataset=self.dataset,
            seed=self.seed,
            step_count=self.step_count,
        )
        if self.fraction is not None:
            info.update(fraction=self.fraction)
        if self.ratio is not None:
            info.update(ratio=self.ratio)
        info.update(self.final_metrics)
        info.update(checkpoint=self.checkpoint)
        return info

    def save(self, folder: str, save_checkpoint: bool = True):
        """Writes trajectory.csv, curve.csv, summary.json and the attacked checkpoint."""
        path = Path(folder)
        path.mkdir(exist_ok=True, parents=True)
        if save_checkpoint and self.bundle is not None:
            self.checkpoint = str(path / "checkpoint")
            self.bundle.save(self.checkpoint)
        pd.DataFrame(self.trajectory, columns=TRAJECTORY_COLUMNS).to_csv(
            path / "trajectory.csv", index=False
        )
        if self.curve:
            pd.DataFrame(self.curve).to_csv(path / "curve.csv", index=False)
        with open(path / "summary.json", "w") as f:
            f.write(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def stratified_subsample(labels, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of a class-stratified `fraction` of `labels`.

    The same (labels, fraction, seed) always gives the same index set.
    """
    labels = np.asarray(labels)
    if not 0 < fraction <= 1:
        raise ArgumentError(f"fraction must lie in (0, 1], got {fraction}")
    indices = np.arange(len(labels))
    if len(indices) == 0:
        raise DataError("cannot subsample an empty split")
    if fraction == 1:
        return indices
    try:
        chosen, _ = train_test_split(
            indices, train_size=fraction, stratify=labels, random_state=seed
        )
    except ValueError as e:
        raise DataError(f"cannot draw a stratified {fraction:.0%} subsample: {e}")
    if len(chosen) == 0:
        raise DataError("subsample is empty")
    return np.sort(chosen)


def attacked_copy(bundle: StudentBundle) -> ModelHandles:
    if bundle.stage != "packaged":
        raise StageError(f"attacks need a packaged bundle, got stage {bundle.stage!r}")
    handles = copy.deepcopy(bundle.handles)
    for param in handles.parameters():
        param.requires_grad = True
    return handles


class Evaluator:
    """Test-split accuracies tracked during an attack."""

    def __init__(
        self,
        dataset,
        original_pattern: Optional[SNPattern] = None,
        new_pattern: Optional[SNPattern] = None,
        primary: str = "acc_raw",
        batch_size: int = 1000,
    ):
        self.images, self.labels = dataset.split("test")
        self.original_pattern = original_pattern
        self.new_pattern = new_pattern
        self.primary = primary
        self.batch_size = batch_size

    def __call__(self, handles: ModelHandles) -> dict:
        metrics = dict(
            acc_raw=accuracy(handles, self.images, self.labels, None, self.batch_size),
            acc_orig_sn=None,
            acc_new_sn=None,
        )
        if self.original_pattern is not None:
            metrics["acc_orig_sn"] = accuracy(
                handles, self.images, self.labels, self.original_pattern, self.batch_size
            )
        if self.new_pattern is not None:
            metrics["acc_new_sn"] = accuracy(
                handles, self.images, self.labels, self.new_pattern, self.batch_size
            )
        return metrics


def run_epochs(
    handles: ModelHandles,
    train_idx: np.ndarray,
    step_fn: Callable[[torch.Tensor], torch.Tensor],
    evaluator: Evaluator,
    cfg: AttackConfig,
    desc: str,
) -> dict:
    """Shared attack loop. step_fn maps a batch of indices to a loss."""
    optimizer = torch.optim.Adam([p for p in handles.parameters() if p.requires_grad], lr=cfg.lr)
    generator = torch.Generator().manual_seed(split_seed(cfg.seed, "shuffle"))
    train_idx = torch.as_tensor(train_idx, dtype=torch.long)
    trajectory, curve = [], []
    step_count = 0

    for epoch in range(1, cfg.epochs + 1):
        handles.train()
        order = train_idx[torch.randperm(len(train_idx), generator=generator)]
        batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for idx in tqdm(batches, desc=f"{desc} epoch {epoch}"):
            loss = step_fn(idx)
            check_finite(loss, epoch)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step_count += 1
            if cfg.eval_every_steps and step_count % cfg.eval_every_steps == 0:
                acc = evaluator(handles)[evaluator.primary]
                curve.append(dict(step=step_count, epoch=epoch, acc=acc))

        info = dict(epoch=epoch, step_count=step_count, **evaluator(handles))
        trajectory.append(info)
        logger.info(str(dict(attack=desc, **info)))

    return dict(trajectory=trajectory, curve=curve, step_count=step_count)


def ce_step_fn(handles: ModelHandles, dataset, device, pattern: Optional[SNPattern] = None):
    def step(idx):
        x = dataset.train_images[idx]
        if pattern is not None:
            x = stamp_images(x, pattern)
        y = dataset.train_labels[idx].to(device)
        return F.cross_entropy(handles(x.to(device)), y)

    return step


def finetune_attack(
    bundle: StudentBundle,
    dataset,
    cfg: AttackConfig,
    original_pattern: Optional[SNPattern] = None,
) -> AttackOutcome:
    """Cross-entropy training of every parameter on raw images of a data fraction.

    original_pattern is only used for measuring, the adversary never sees it.
    """
    device = get_device(cfg.device)
    handles = attacked_copy(bundle).to(device)
    train_idx = stratified_subsample(
        dataset.train_labels.numpy(), cfg.data_fraction, split_seed(cfg.seed, "subsample")
    )
    evaluator = Evaluator(dataset, original_pattern, batch_size=cfg.test_batch_size)
    result = run_epochs(
        handles, train_idx, ce_step_fn(handles, dataset, device), evaluator, cfg, "finetune"
    )
    return AttackOutcome(
        attack_kind="finetune",
        fraction=cfg.data_fraction,
        seed=cfg.seed,
        final_metrics=evaluator(handles),
        bundle=StudentBundle(handles.eval(), stage="packaged"),
        **result,
    )


def scratch_baseline(dataset, spec: ArchitectureSpec, cfg: AttackConfig) -> AttackOutcome:
    """Reference curve: the same protocol from a random init."""
    device = get_device(cfg.device)
    handles = instantiate(spec, split_seed(cfg.seed, "scratch_init"), with_auxiliary=False)
    handles = handles.to(device)
    train_idx = stratified_subsample(
        dataset.train_labels.numpy(), cfg.data_fraction, split_seed(cfg.seed, "subsample")
    )
    evaluator = Evaluator(dataset, batch_size=cfg.test_batch_size)
    result = run_epochs(
        handles, train_idx, ce_step_fn(handles, dataset, device), evaluator, cfg, "scratch"
    )
    return AttackOutcome(
        attack_kind="scratch_baseline",
        fraction=cfg.data_fraction,
        seed=cfg.seed,
        final_metrics=evaluator(handles),
        bundle=StudentBundle(handles.eval(), stage="packaged"),
        **result,
    )


def prunable_parameters(handles: ModelHandles):
    return [
        (module, "weight")
        for module in handles.modules()
        if isinstance(module, (nn.Conv2d, nn.Linear))
    ]


def prune_attack(
    bundle: StudentBundle,
    prune_ratio: float,
    dataset=None,
    pattern: Optional[SNPattern] = None,
    batch_size: int = 1000,
) -> AttackOutcome:
    """One-shot global L1 pruning of conv and dense weights, biases exempt, no retraining."""
    if not 0 < prune_ratio < 1:
        raise ArgumentError(f"prune ratio must lie in (0, 1), got {prune_ratio}")
    handles = attacked_copy(bundle)
    params = prunable_parameters(handles)
    n_prunable = sum(module.weight.numel() for module, _ in params)
    amount = math.ceil(prune_ratio * n_prunable)

    prune.global_unstructured(params, pruning_method=prune.L1Unstructured, amount=amount)
    for module, name in params:
        prune.remove(module, name)

    metrics = dict(n_prunable=n_prunable, n_pruned=amount)
    if dataset is not None:
        evaluator = Evaluator(dataset, original_pattern=pattern, batch_size=batch_size)
        scores = evaluator(handles)
        metrics.update(acc_raw=scores["acc_raw"], acc_with_sn=scores["acc_orig_sn"])
    logger.info(str(dict(attack="prune", ratio=prune_ratio, **metrics)))
    return AttackOutcome(
        attack_kind="prune",
        ratio=prune_ratio,
        final_metrics=metrics,
        bundle=StudentBundle(handles.eval(), bundle.sn_record_hash, stage="packaged"),
    )


def transfer_subsample(target_dataset, cfg: AttackConfig) -> np.ndarray:
    return stratified_subsample(
        target_dataset.train_labels.numpy(),
        cfg.data_fraction,
        split_seed(cfg.seed, "transfer_subsample"),
    )


def transfer_attack(
    bundle: StudentBundle,
    target_dataset,
    cfg: AttackConfig,
    original_pattern: Optional[SNPattern] = None,
) -> AttackOutcome:
    """Swaps every dense layer for a fresh one sized to the target, then trains everything.

    Before training, a linear probe on the victim's frozen G_e features of raw
    target images and the accuracy of the random head are recorded as epoch-0
    metrics. The target subsample is drawn with its own seed, independent of the
    fine-tuning draw.
    """
    device = get_device(cfg.device)
    packaged = attacked_copy(bundle)
    train_idx = transfer_subsample(target_dataset, cfg)
    test_x, test_y = target_dataset.split("test")
    probe_idx = torch.as_tensor(train_idx)
    probe_acc = linear_probe(
        extract_features(packaged, target_dataset.train_images[probe_idx]),
        target_dataset.train_labels[probe_idx].numpy(),
        extract_features(packaged, test_x),
        test_y.numpy(),
        seed=split_seed(cfg.seed, "probe"),
    )

    handles = replace_dense_layers(
        packaged, target_dataset.num_classes, split_seed(cfg.seed, "transfer_head")
    ).to(device)
    evaluator = Evaluator(target_dataset, original_pattern, batch_size=cfg.test_batch_size)
    epoch0 = dict(acc_epoch0=evaluator(handles)["acc_raw"], probe_acc_epoch0=probe_acc)
    logger.info(str(dict(attack="transfer", **epoch0)))

    result = run_epochs(
        handles, train_idx, ce_step_fn(handles, target_dataset, device), evaluator, cfg, "transfer"
    )
    return AttackOutcome(
        attack_kind="transfer",
        fraction=cfg.data_fraction,
        seed=cfg.seed,
        final_metrics=dict(evaluator(handles), **epoch0),
        bundle=StudentBundle(handles.eval(), stage="packaged"),
        **result,
    )


def same_pattern(a: SNPattern, b: SNPattern, height: int, width: int) -> bool:
    return np.array_equal(a.full_mask(height, width), b.full_mask(height, width))


def overwrite_attack(
    bundle: StudentBundle,
    original_pattern: SNPattern,
    new_pattern: SNPattern,
    dataset,
    cfg: AttackConfig,
) -> AttackOutcome:
    """Re-runs the embedding scheme with ground-truth labels to replace the serial number.

    Each batch is split into a new-pattern part trained with cross entropy and
    an original-pattern part trained through a fresh GRL branch. In the default
    three_branch mode raw images form a third part on the GRL branch.
    """
    h, w, _ = bundle.handles.spec.input_shape
    if same_pattern(original_pattern, new_pattern, h, w):
        raise ArgumentError("new pattern must differ from the original in at least one cell")
    device = get_device(cfg.device)
    packaged = attacked_copy(bundle)
    handles = ModelHandles(
        packaged.spec,
        split_seed(cfg.seed, "overwrite_head"),
        with_auxiliary=True,
        grl_lambda=cfg.grl_lambda,
    )
    handles.g_e.load_state_dict(packaged.g_e.state_dict())
    handles.g_y.load_state_dict(packaged.g_y.state_dict())
    handles = handles.to(device)

    train_idx = stratified_subsample(
        dataset.train_labels.numpy(), cfg.data_fraction, split_seed(cfg.seed, "subsample")
    )
    n_parts = 3 if cfg.overwrite_mode == "three_branch" else 2

    def step(idx):
        parts = torch.tensor_split(idx, n_parts)
        patterns = [new_pattern, original_pattern, None][:n_parts]
        loss = torch.zeros((), device=device)
        for i, (part, pattern) in enumerate(zip(parts, patterns)):
            if len(part) == 0:
                continue
            x = dataset.train_images[part]
            if pattern is not None:
                x = stamp_images(x, pattern)
            x, y = x.to(device), dataset.train_labels[part].to(device)
            if i == 0:
                loss = loss + F.cross_entropy(handles.logits(x, "y"), y)
            else:
                loss = loss + sne_loss(handles, x, y)
        return loss

    evaluator = Evaluator(
        dataset, original_pattern, new_pattern, "acc_new_sn", batch_size=cfg.test_batch_size
    )
    result = run_epochs(handles, train_idx, step, evaluator, cfg, "overwrite")
    packaged = handles.strip_auxiliary().eval()
    return AttackOutcome(
        attack_kind="overwrite",
        fraction=cfg.data_fraction,
        seed=cfg.seed,
        final_metrics=evaluator(packaged),
        bundle=StudentBundle(packaged, stage="packaged"),
        **result,
    )


def steps_to_reach(outcome: AttackOutcome, target_acc: float, metric: str = "") -> Optional[int]:
    """First optimizer step count at which `metric` reaches target_acc, None if never.

    Uses the intra-epoch curve when one was sampled, the per-epoch trajectory otherwise.
    """
    if outcome.curve and not metric:
        for point in outcome.curve:
            if point["acc"] >= target_acc:
                return point["step"]
        return None
    metric = metric or ("acc_new_sn" if outcome.attack_kind == "overwrite" else "acc_raw")
    for row in outcome.trajectory:
        if row.get(metric) is not None and row[metric] >= target_acc:
            return row["step_count"]
    return None


def slow_start_holds(
    dsn: AttackOutcome, scratch: AttackOutcome, head: float = 0.1, metric: str = "acc_raw"
) -> bool:
    """Mean accuracy over the first `head` share of epochs is lower for the attacked model."""
    n = min(len(dsn.trajectory), len(scratch.trajectory))
    if n == 0:
        return False
    k = max(1, math.ceil(head * n))
    mean_dsn = np.mean([row[metric] for row in dsn.trajectory[:k]])
    mean_scratch = np.mean([row[metric] for row in scratch.trajectory[:k]])
    return bool(mean_dsn < mean_scratch)


def run_attack(
    cfg: AttackConfig,
    bundle: Optional[StudentBundle] = None,
    dataset=None,
    spec: Optional[ArchitectureSpec] = None,
    original_pattern: Optional[SNPattern] = None,
    new_pattern: Optional[SNPattern] = None,
    target_dataset=None,
) -> AttackOutcome:
    """Dispatches on cfg.attack_kind and tags the outcome with the dataset name."""
    kind = cfg.attack_kind
    if kind != "scratch_baseline" and bundle is None:
        raise ArgumentError(f"{kind} attack needs a packaged bundle")
    if kind == "scratch_baseline":
        outcome = scratch_baseline(dataset, spec or bundle.handles.spec, cfg)
    elif kind == "finetune":
        outcome = finetune_attack(bundle, dataset, cfg, original_pattern)
    elif kind == "prune":
        outcome = prune_attack(
            bundle, cfg.prune_ratio, dataset, original_pattern, cfg.test_batch_size
        )
    elif kind == "transfer":
        outcome = transfer_attack(bundle, target_dataset or dataset, cfg, original_pattern)
    else:
        if new_pattern is None or original_pattern is None:
            raise ArgumentError("overwrite attack needs the original and a new pattern")
        outcome = overwrite_attack(bundle, original_pattern, new_pattern, dataset, cfg)
    if dataset is not None:
        outcome.dataset = dataset.name
    return outcome


def run_sweep(
    cfg: AttackConfig, values: Optional[List[float]] = None, **kwargs
) -> List[AttackOutcome]:
    """Runs one attack over the fraction grid (or the ratio grid for pruning)."""
    key = "prune_ratio" if cfg.attack_kind == "prune" else "data_fraction"
    values = values or (PRUNE_RATIOS if key == "prune_ratio" else FRACTIONS)
    outcomes = []
    for value in values:
        outcome = run_attack(cfg.copy(update={key: value}), **kwargs)
        outcomes.append(outcome)
        print(dict(kind=cfg.attack_kind, **{key: value}, final=outcome.final_metrics))
    return outcomes


def sweep_frame(outcomes: List[AttackOutcome]) -> pd.DataFrame:
    rows: List[Dict] = [o.summary() for o in outcomes]
    return pd.DataFrame(rows)
