import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
from pydantic import ValidationError

from analysis import embedding_separability, export_embeddings
from attacks import AttackConfig, run_attack, run_sweep, sweep_frame
from configuration import ConfigurationParer, init_logger
from data_process import fetch_data, load_dataset, to_nchw
from errors import ConfigError, DSNError, MissingInputError, StageError
from model_zoo import ArchitectureSpec, build_spec
from nn_utils import set_seed, split_seed
from reporting import EvalRow, build_report
from runs import RunDirectory, RunManifest, hash_path, utc_now
from scoring import evaluate, safe_divide
from sn_core import (
    OwnerIdentity,
    SignatureRecord,
    generate_keypair,
    generate_serial,
    verify_signature,
)
from training import (
    DEFAULT_EPOCHS,
    StudentBundle,
    TeacherModel,
    TrainingConfig,
    package_student,
    predict,
    train_student,
    train_teacher,
    write_metrics_csv,
)

logger = logging.getLogger(__name__)

GROUPS = dict(
    keygen=["save", "sn"],
    new_key=["save", "sn"],
    verify=["save", "sn"],
    fetch_data=["save", "data"],
    train_teacher=["save", "data", "model", "optimizer", "run"],
    train_student=["save", "data", "model", "optimizer", "run", "sn"],
    package=["save", "model", "run", "sn"],
    predict=["save", "data", "model", "run", "sn", "eval"],
    attack=["save", "data", "model", "optimizer", "run", "sn", "attack"],
    eval=["save", "data", "model", "run", "sn", "eval"],
    report=["save"],
    export_embeddings=["save", "data", "model", "run", "sn", "eval"],
)
# commands that own their run directory and hold its lock
WRITERS = {"keygen", "train_teacher", "train_student", "package", "attack"}
# commands that never create a run directory
NO_RUN = {"new_key", "verify", "fetch_data"}

EXIT_CODES = """
exit codes:
  0 ok (verify: certificate valid)
  1 verify: certificate invalid, or unexpected error
  2 configuration or argument error
  3 missing input (file, key, dataset)
  4 stage violation or locked run directory
  5 training divergence
"""


def build_parser(command: str) -> ConfigurationParer:
    parser = ConfigurationParer(prog=f"cli.py {command.replace('_', '-')}", epilog=EXIT_CODES)
    for group in GROUPS[command]:
        getattr(parser, f"add_{group}_cfgs")()
    return parser


def default_run_id(cfg) -> str:
    parts = [str(getattr(cfg, k)) for k in ("dataset", "seed") if hasattr(cfg, k)]
    return "_".join(parts) or "keys"


def config_model(model_class, **kwargs):
    try:
        return model_class(**kwargs)
    except ValidationError as e:
        raise ConfigError(str(e))


def resolve_epochs(cfg, stage: str) -> int:
    if cfg.epochs >= 0:
        return cfg.epochs
    return DEFAULT_EPOCHS[cfg.dataset][stage]


def training_config(cfg, stage: str) -> TrainingConfig:
    return config_model(
        TrainingConfig,
        lr_initial=cfg.learning_rate,
        lr_patience=cfg.lr_patience,
        lr_min_delta=cfg.lr_min_delta,
        adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2,
        adam_epsilon=cfg.adam_epsilon,
        teacher_batch=cfg.teacher_batch_size,
        student_batch=cfg.student_batch_size,
        grl_lambda=cfg.grl_lambda,
        grl_warmup=cfg.grl_warmup,
        distill_temperature=cfg.distill_temperature,
        step_mode=cfg.step_mode,
        sne_perturbed_fraction=cfg.sne_perturbed_fraction,
        epochs=resolve_epochs(cfg, stage),
        seed=cfg.seed,
        val_size=cfg.val_size,
        test_batch_size=cfg.test_batch_size,
        device=cfg.device,
    )


def attack_config(cfg) -> AttackConfig:
    # attacks get the scratch (teacher) budget so their step counts compare one to one
    return config_model(
        AttackConfig,
        attack_kind=cfg.kind,
        data_fraction=cfg.fraction,
        prune_ratio=cfg.ratio,
        epochs=resolve_epochs(cfg, "teacher"),
        lr=cfg.learning_rate,
        batch_size=cfg.attack_batch_size,
        seed=cfg.seed,
        grl_lambda=cfg.grl_lambda,
        overwrite_mode=cfg.overwrite_mode,
        eval_every_steps=cfg.eval_every_steps,
        test_batch_size=cfg.test_batch_size,
        device=cfg.device,
    )


def seeds(cfg) -> dict:
    if not hasattr(cfg, "seed"):
        return {}
    purposes = ["data", "init", "val", "shuffle", "subsample", "transfer_subsample", "probe"]
    return dict(master=cfg.seed, **{p: split_seed(cfg.seed, p) for p in purposes})


def require(cfg, name: str) -> str:
    value = getattr(cfg, name, "")
    if not value:
        raise ConfigError(f"--{name} is required for this command")
    return value


def load_data(cfg):
    return load_dataset(cfg.dataset, cfg.data_dir, seed=split_seed(cfg.seed, "data"))


def load_spec(cfg, data) -> ArchitectureSpec:
    if cfg.arch_file:
        if not Path(cfg.arch_file).is_file():
            raise MissingInputError(f"architecture file not found: {cfg.arch_file}")
        spec = ArchitectureSpec.load(cfg.arch_file)
    else:
        spec = build_spec(cfg.dataset, cfg.num_classes or data.num_classes)
    return spec


def load_record(path: str) -> SignatureRecord:
    record = SignatureRecord.load(path)
    if not verify_signature(record):
        raise ConfigError(f"certificate {path} does not verify")
    return record


def load_pattern(cfg, name: str = "sn_cert"):
    path = getattr(cfg, name, "")
    if not path:
        return None
    return load_record(path).pattern().upscale(cfg.upscale)


def cmd_new_key(cfg, run=None):
    path = require(cfg, "key_file")
    seed = cfg.key_seed.encode() if cfg.key_seed else None
    generate_keypair(path, seed)
    print(dict(key_file=path))


def cmd_keygen(cfg, run):
    identity = config_model(
        OwnerIdentity,
        owner_name=cfg.owner,
        timestamp=cfg.timestamp or OwnerIdentity.now(),
        keypair_ref=cfg.key_file,
    )
    pattern, record = generate_serial(
        identity, cfg.rows, cfg.cols, tuple(cfg.anchor), hash_algorithm=cfg.hash_algorithm
    )
    out = run.resolve(cfg.out or "sn.json")
    record.save(str(out))
    print(dict(certificate=str(out), verifier=record.verifier, bits=record.pattern_bits))


def cmd_verify(cfg, run=None) -> int:
    record = SignatureRecord.load(require(cfg, "sn_cert"))
    valid = verify_signature(record)
    print(dict(certificate=cfg.sn_cert, valid=valid, record_hash=record.record_hash()))
    return 0 if valid else 1


def cmd_fetch_data(cfg, run=None):
    fetch_data(cfg.dataset, cfg.data_dir)


def cmd_train_teacher(cfg, run):
    set_seed(cfg.seed, cfg.device)
    data = load_data(cfg)
    spec = load_spec(cfg, data)
    config = training_config(cfg, "teacher")
    teacher = train_teacher(data, spec, config)
    teacher.save(str(run.resolve(cfg.out or "teacher", "checkpoints")))
    write_metrics_csv(
        teacher.metadata["history"],
        str(run.sub("metrics") / "teacher.csv"),
        columns=["epoch", "loss", "val_acc", "lr"],
    )
    acc = evaluate(teacher, data, batch_size=cfg.test_batch_size)
    logger.info(str(dict(teacher_test_acc=acc)))


def cmd_train_student(cfg, run):
    set_seed(cfg.seed, cfg.device)
    teacher = TeacherModel.load(require(cfg, "teacher_ckpt"), cfg.device)
    record = load_record(require(cfg, "sn_cert"))
    pattern = record.pattern().upscale(cfg.upscale)
    data = load_data(cfg)
    config = training_config(cfg, "student")
    bundle = train_student(teacher, data, pattern, config, sn_record_hash=record.record_hash())
    bundle.save(str(run.resolve(cfg.out or "student", "checkpoints")))
    write_metrics_csv(bundle.metrics, str(run.sub("metrics") / "student.csv"))


def cmd_package(cfg, run):
    bundle = StudentBundle.load(require(cfg, "checkpoint"))
    packaged = package_student(bundle)
    out = run.resolve(cfg.out or "student_packaged", "checkpoints")
    packaged.save(str(out))
    print(dict(packaged=str(out), sn_record_hash=packaged.sn_record_hash))


def load_images(cfg):
    if cfg.images:
        if not Path(cfg.images).is_file():
            raise MissingInputError(f"image file not found: {cfg.images}")
        arrays = np.load(cfg.images)
        labels = torch.as_tensor(arrays["labels"]) if "labels" in arrays.files else None
        return to_nchw(arrays["images"]), labels
    return load_data(cfg).split(cfg.split)


def cmd_predict(cfg, run):
    bundle = StudentBundle.load(require(cfg, "checkpoint"), cfg.device)
    pattern = load_pattern(cfg)
    if pattern is None:
        logger.warning("no serial number supplied")
    images, labels = load_images(cfg)
    preds, probs = predict(bundle, images, pattern, cfg.test_batch_size)

    if cfg.out:
        out = run.resolve(cfg.out, "metrics")
        out.parent.mkdir(exist_ok=True, parents=True)
        frame = pd.DataFrame(
            dict(index=range(len(preds)), label=preds.numpy(), prob=probs.max(-1).values.numpy())
        )
        frame.to_csv(out, index=False)
        print(dict(predictions=str(out)))
    else:
        for i, label in enumerate(preds.tolist()):
            print(dict(index=i, label=label))
    if labels is not None:
        correct = (preds == labels.long()).sum().item()
        print(dict(accuracy=round(100.0 * safe_divide(correct, len(labels)), 2)))


def load_model_for_eval(cfg):
    if cfg.checkpoint:
        return cfg.checkpoint, StudentBundle.load(cfg.checkpoint, cfg.device)
    if cfg.teacher_ckpt:
        return cfg.teacher_ckpt, TeacherModel.load(cfg.teacher_ckpt, cfg.device)
    raise ConfigError("--checkpoint or --teacher_ckpt is required for this command")


def cmd_eval(cfg, run):
    path, model = load_model_for_eval(cfg)
    if model.stage not in ("packaged", "teacher"):
        raise StageError(f"eval needs a packaged bundle, got stage {model.stage!r}")
    data = load_data(cfg)
    pattern = load_pattern(cfg)
    acc_with_sn = None
    if pattern is not None:
        acc_with_sn = evaluate(model, data, pattern, cfg.split, cfg.test_batch_size)
    acc_without_sn = evaluate(model, data, None, cfg.split, cfg.test_batch_size)
    row = EvalRow(
        model_id=Path(path).name,
        stage=model.stage,
        dataset=data.name,
        checkpoint_hash=hash_path(path),
        split=cfg.split,
        num_classes=data.num_classes,
        acc_with_sn=acc_with_sn,
        acc_without_sn=acc_without_sn,
    )
    row.save(str(run.sub("metrics") / f"eval_{row.model_id}.json"))
    print(row.dict())


def cmd_attack(cfg, run):
    set_seed(cfg.seed, cfg.device)
    attack_cfg = attack_config(cfg)
    if cfg.kind == "overwrite":
        require(cfg, "sn_cert")
        require(cfg, "new_sn_cert")
    bundle, spec = None, None
    if cfg.kind != "scratch_baseline":
        bundle = StudentBundle.load(require(cfg, "checkpoint"), cfg.device)
        if bundle.stage != "packaged":
            raise StageError(f"attacks need a packaged bundle, got stage {bundle.stage!r}")
    original = load_pattern(cfg)
    new = load_pattern(cfg, "new_sn_cert")
    data = load_data(cfg)
    if bundle is None:
        spec = load_spec(cfg, data)

    kwargs = dict(
        bundle=bundle, dataset=data, spec=spec, original_pattern=original, new_pattern=new
    )
    if cfg.sweep:
        outcomes = run_sweep(attack_cfg, **kwargs)
    else:
        outcomes = [run_attack(attack_cfg, **kwargs)]

    for outcome in outcomes:
        value = outcome.ratio if outcome.ratio is not None else outcome.fraction
        outcome.save(str(run.sub("attacks") / f"{outcome.attack_kind}_{round(value * 100)}"))
    frame = sweep_frame(outcomes)
    frame.to_csv(run.sub("metrics") / f"attack_{cfg.kind}.csv", index=False)
    print(frame.to_string(index=False))


def cmd_report(cfg, run):
    report = build_report(str(run.path))
    report.save(str(run.sub("reports")))
    print(report.to_markdown())


def cmd_export_embeddings(cfg, run):
    bundle = StudentBundle.load(require(cfg, "checkpoint"), cfg.device)
    data = load_data(cfg)
    pattern = load_pattern(cfg)
    table = export_embeddings(
        bundle, data, pattern, cfg.n_samples, seed=split_seed(cfg.seed, "export")
    )
    out = run.resolve(cfg.out or "embeddings.csv", "metrics")
    out.parent.mkdir(exist_ok=True, parents=True)
    table.to_csv(out, index=False)
    print(dict(embeddings=str(out), **embedding_separability(table)))


def input_hashes(cfg) -> dict:
    hashes = {}
    for name in ("teacher_ckpt", "checkpoint", "sn_cert", "new_sn_cert", "arch_file", "images"):
        path = getattr(cfg, name, "")
        if path and Path(path).exists():
            hashes[name] = hash_path(path)
    return hashes


def snapshot(cfg) -> str:
    """Resolved config as YAML-style key: value lines, secrets excluded."""
    lines = []
    for key, value in sorted(vars(cfg).items()):
        if key in ("key_seed", "config_file"):
            continue
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def setup_logging(cfg, run: Optional[RunDirectory]):
    log_file = None
    if run is not None and hasattr(cfg, "log_file"):
        log_file = str(run.path / cfg.log_file)
    init_logger(
        root_log_level=getattr(cfg, "root_log_level", logging.DEBUG),
        console_log_level=getattr(cfg, "console_log_level", logging.INFO),
        log_file=log_file,
        log_file_level=getattr(cfg, "file_log_level", logging.NOTSET),
    )


def execute(command: str, cfg, parser: ConfigurationParer) -> int:
    handler = globals()[f"cmd_{command}"]
    if command in NO_RUN:
        setup_logging(cfg, None)
        return handler(cfg) or 0

    run = RunDirectory(cfg.runs_root, cfg.run_id or default_run_id(cfg))
    writer = command in WRITERS
    if writer:
        run.acquire()
    try:
        run.create()
        setup_logging(cfg, run)
        logger.info(parser.format_values())
        manifest = RunManifest(
            run_id=run.run_id,
            command=command,
            config={k: str(v) for k, v in vars(cfg).items() if k != "key_seed"},
            seeds=seeds(cfg),
            inputs=input_hashes(cfg),
            started=utc_now(),
        )
        if writer:
            run.write_snapshot(snapshot(cfg))
        code = handler(cfg, run) or 0
        run.write_manifest(manifest, latest=writer)
    finally:
        run.release()
    return code


def usage() -> str:
    names = ", ".join(c.replace("_", "-") for c in GROUPS)
    return f"usage: cli.py <command> [options]\ncommands: {names}\n{EXIT_CODES}"


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(usage())
        return 0 if argv else 2
    command = argv[0].replace("-", "_")
    if command not in GROUPS:
        print(usage(), file=sys.stderr)
        return 2

    parser = build_parser(command)
    try:
        cfg = parser.parse_args(argv[1:])
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    try:
        return execute(command, cfg, parser)
    except DSNError as e:
        logger.error(str(dict(command=command, error=type(e).__name__, message=str(e))))
        return e.exit_code


"""
p cli.py new-key --key_file keys/owner.pem
p cli.py fetch-data --dataset mnist --data_dir data
p cli.py train-teacher --config_file config.yml --run_id mnist
p cli.py keygen --config_file config.yml --run_id mnist --owner alice --key_file keys/owner.pem
p cli.py train-student --config_file config.yml --run_id mnist \
--teacher_ckpt runs/mnist/checkpoints/teacher --sn_cert runs/mnist/sn.json
p cli.py package --run_id mnist --checkpoint runs/mnist/checkpoints/student
p cli.py eval --run_id mnist --checkpoint runs/mnist/checkpoints/student_packaged \
--sn_cert runs/mnist/sn.json
p cli.py eval --run_id mnist --teacher_ckpt runs/mnist/checkpoints/teacher
p cli.py attack --run_id mnist --kind prune --sweep \
--checkpoint runs/mnist/checkpoints/student_packaged --sn_cert runs/mnist/sn.json
p cli.py attack --run_id mnist --kind scratch_baseline --sweep
p cli.py report --run_id mnist
"""


if __name__ == "__main__":
    sys.exit(main())
