"""End-to-end MNIST runs. Slow: select with `pytest -m slow`, needs MNIST below $DSN_DATA_ROOT."""
import pytest
import torch

from analysis import embedding_separability, export_embeddings, probe_separability
from attacks import (
    FRACTIONS,
    PRUNE_RATIOS,
    AttackConfig,
    finetune_attack,
    overwrite_attack,
    prune_attack,
    scratch_baseline,
    slow_start_holds,
    steps_to_reach,
    transfer_attack,
)
from data_process import load_dataset
from model_zoo import build_spec, instantiate
from nn_utils import iterate_batches, split_seed
from scoring import evaluate, predict_logits, top1
from sn_core import OwnerIdentity, generate_keypair, generate_serial, stamp_images
from training import (
    DEFAULT_EPOCHS,
    TrainingConfig,
    distill_loss,
    distill_step,
    make_optimizer,
    package_student,
    train_student,
    train_teacher,
)

pytestmark = pytest.mark.slow

SEED = 5216
ATTACK_EPOCHS = DEFAULT_EPOCHS["mnist"]["teacher"]
TRANSFER_FINALS = {0.1: 93.6, 0.2: 94.5, 0.3: 95.6, 0.4: 96.9}
OVERWRITE_FINALS = {0.1: 93.2, 0.2: 93.7, 0.3: 94.3, 0.4: 95.8}


@pytest.fixture(scope="module")
def mnist(mnist_root):
    return load_dataset("mnist", mnist_root, seed=split_seed(SEED, "data"))


def owner_pattern(tmp_path_factory, owner: str, anchor):
    key_file = str(tmp_path_factory.mktemp("keys") / f"{owner}.pem")
    generate_keypair(key_file, seed=owner.encode())
    identity = OwnerIdentity(
        owner_name=owner, timestamp="2024-01-01T00:00:00+00:00", keypair_ref=key_file
    )
    pattern, _ = generate_serial(identity, 3, 3, anchor)
    return pattern


@pytest.fixture(scope="module")
def pattern(tmp_path_factory):
    return owner_pattern(tmp_path_factory, "Acme Corp", (0, 0))


@pytest.fixture(scope="module")
def adversary_pattern(tmp_path_factory):
    return owner_pattern(tmp_path_factory, "Mallory", (24, 24))


@pytest.fixture(scope="module")
def teacher(mnist):
    config = TrainingConfig(epochs=DEFAULT_EPOCHS["mnist"]["teacher"], seed=SEED)
    return train_teacher(mnist, build_spec("mnist"), config)


@pytest.fixture(scope="module")
def packaged(teacher, mnist, pattern):
    config = TrainingConfig(epochs=DEFAULT_EPOCHS["mnist"]["student"], seed=SEED)
    return package_student(train_student(teacher, mnist, pattern, config))


def attack_config(kind: str, fraction: float) -> AttackConfig:
    return AttackConfig(attack_kind=kind, data_fraction=fraction, epochs=ATTACK_EPOCHS, seed=SEED)


@pytest.fixture(scope="module")
def scratch(mnist):
    outcomes = {}

    def run(fraction):
        if fraction not in outcomes:
            cfg = attack_config("scratch_baseline", fraction)
            outcomes[fraction] = scratch_baseline(mnist, build_spec("mnist"), cfg)
        return outcomes[fraction]

    return run


def test_teacher_accuracy(teacher, mnist):
    assert evaluate(teacher, mnist) >= 99.0


def test_student_with_and_without_serial_number(teacher, packaged, mnist, pattern):
    with_sn = evaluate(packaged, mnist, pattern)
    without_sn = evaluate(packaged, mnist)
    assert with_sn >= 99.0
    assert evaluate(teacher, mnist) - with_sn <= 0.8
    assert 5.0 <= without_sn <= 15.0


def test_distillation_alone_matches_teacher(teacher, mnist, pattern):
    config = TrainingConfig(epochs=DEFAULT_EPOCHS["mnist"]["student"], seed=SEED)
    student = instantiate(teacher.spec, split_seed(SEED, "init"), with_auxiliary=False)
    optimizer = make_optimizer(student, config)
    train_x, _ = mnist.split("train")
    generator = torch.Generator().manual_seed(split_seed(SEED, "shuffle"))
    for _ in range(config.epochs):
        student.train()
        for idx in iterate_batches(len(train_x), config.student_batch, generator):
            x = train_x[idx]
            distill_step(student, optimizer, teacher.probabilities(x), stamp_images(x, pattern))

    student.eval()
    test_x, _ = mnist.split("test")
    with torch.no_grad():
        p_t = teacher.probabilities(test_x)
        p_s = torch.softmax(predict_logits(student, test_x, pattern), dim=-1)
    assert distill_loss(p_t, p_s).item() < 0.05


def test_raw_features_are_not_linearly_separable(packaged, mnist, pattern):
    scores = probe_separability(packaged, mnist, pattern, seed=SEED)
    assert scores["probe_raw"] <= 30.0
    assert scores["probe_stamped"] >= 95.0


def test_stamped_embeddings_cluster_by_label(packaged, mnist, pattern):
    table = export_embeddings(packaged, mnist, pattern, n=1000, seed=SEED)
    scores = embedding_separability(table)
    assert scores["silhouette_stamped"] > scores["silhouette_raw"]


@pytest.mark.parametrize("ratio", PRUNE_RATIOS)
def test_pruning_keeps_the_lock(packaged, mnist, pattern, ratio):
    unpruned = evaluate(packaged, mnist, pattern)
    outcome = prune_attack(packaged, ratio, mnist, pattern)
    assert outcome.final_metrics["acc_with_sn"] >= unpruned - 2.0
    assert outcome.final_metrics["acc_raw"] < 15.0


def test_single_weight_prune_keeps_predictions(packaged, mnist, pattern):
    outcome = prune_attack(packaged, 1e-9)
    images, _ = mnist.split("test")
    before = top1(predict_logits(packaged.handles, images, pattern))
    after = top1(predict_logits(outcome.bundle.handles, images, pattern))
    assert (before == after).float().mean().item() >= 0.999


@pytest.mark.parametrize("fraction", FRACTIONS)
def test_finetune_costs_as_much_as_scratch(packaged, mnist, pattern, scratch, fraction):
    outcome = finetune_attack(packaged, mnist, attack_config("finetune", fraction), pattern)
    baseline = scratch(fraction)
    assert abs(outcome.final_metrics["acc_raw"] - baseline.final_metrics["acc_raw"]) <= 2.5
    assert slow_start_holds(outcome, baseline)


@pytest.mark.parametrize("fraction", FRACTIONS)
def test_transfer_learning(packaged, mnist, pattern, fraction):
    outcome = transfer_attack(packaged, mnist, attack_config("transfer", fraction), pattern)
    assert abs(outcome.final_metrics["acc_raw"] - TRANSFER_FINALS[fraction]) <= 3.0
    assert outcome.final_metrics["probe_acc_epoch0"] <= 30.0


@pytest.mark.parametrize("fraction", FRACTIONS)
def test_overwriting_costs_more_than_scratch(
    packaged, mnist, pattern, adversary_pattern, scratch, fraction
):
    cfg = attack_config("overwrite", fraction)
    outcome = overwrite_attack(packaged, pattern, adversary_pattern, mnist, cfg)
    assert abs(outcome.final_metrics["acc_new_sn"] - OVERWRITE_FINALS[fraction]) <= 3.0

    baseline = scratch(fraction)
    target = baseline.final_metrics["acc_raw"]
    scratch_steps = steps_to_reach(baseline, target)
    overwrite_steps = steps_to_reach(outcome, target)
    assert scratch_steps is not None
    assert overwrite_steps is None or overwrite_steps >= 1.5 * scratch_steps
