import logging
import os

import configargparse

DATA_ROOT_ENV = "DSN_DATA_ROOT"


def init_logger(
    root_log_level=logging.DEBUG,
    console_log_level=logging.NOTSET,
    log_file=None,
    log_file_level=logging.NOTSET,
):
    """This funtion initializes a customized logger

    Keyword Arguments:
        root_log_level {int} -- root logging level (default: {logging.DEBUG})
        console_log_level {int} -- console logging level (default: {logging.NOTSET})
        log_file {str} -- logging file path (default: {None})
        log_file_level {int} -- logging file level (default: {logging.NOTSET})
    """

    log_format = logging.Formatter(
        "[%(asctime)s - %(filename)s - line:%(lineno)d - %(levelname)s]: %(message)s"
    )
    handlers = []

    console_handler = logging.StreamHandler()
    console_handler.setLevel(console_log_level)
    console_handler.setFormatter(log_format)
    handlers.append(console_handler)

    if log_file is not None and log_file != "":
        parent = os.path.dirname(log_file)
        if parent and not os.path.exists(parent):
            os.makedirs(parent)
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(log_file_level)
        file_handler.setFormatter(log_format)
        handlers.append(file_handler)

    logging.basicConfig(level=root_log_level, handlers=handlers, force=True)


class StoreLoggingLevelAction(configargparse.Action):
    """This class converts string into logging level"""

    LEVELS = {
        "CRITICAL": logging.CRITICAL,
        "ERROR": logging.ERROR,
        "WARNING": logging.WARNING,
        "INFO": logging.INFO,
        "DEBUG": logging.DEBUG,
        "NOTSET": logging.NOTSET,
    }

    CHOICES = list(LEVELS.keys()) + [str(_) for _ in LEVELS.values()]

    def __init__(self, option_strings, dest, help=None, **kwargs):
        super().__init__(option_strings, dest, help=help, **kwargs)

    def __call__(self, parser, namespace, value, option_string=None):
        """This function gets the key 'value' in the LEVELS, or just uses value"""

        level = StoreLoggingLevelAction.LEVELS.get(value, value)
        setattr(namespace, self.dest, level)


def parse_anchor(value: str):
    """Parses "row,col" into a pair of ints."""
    try:
        row, col = (int(part) for part in str(value).split(","))
    except ValueError:
        raise configargparse.ArgumentTypeError(
            f"anchor must look like 'row,col', got {value!r}"
        )
    return row, col


class ConfigurationParer:
    """This class defines customized configuration parser

    Every flag doubles as a key of the YAML config file. Resolution order is
    command line > environment variable > config file > default.
    """

    def __init__(
        self,
        config_file_parser_class=configargparse.YAMLConfigFileParser,
        formatter_class=configargparse.ArgumentDefaultsHelpFormatter,
        **kwargs,
    ):
        """This funtion decides config parser and formatter

        Keyword Arguments:
            config_file_parser_class {configargparse.ConfigFileParser} -- config file parser (default: {configargparse.YAMLConfigFileParser})
            formatter_class {configargparse.ArgumentDefaultsHelpFormatter} -- config formatter (default: {configargparse.ArgumentDefaultsHelpFormatter})
        """

        self.parser = configargparse.ArgumentParser(
            config_file_parser_class=config_file_parser_class,
            formatter_class=formatter_class,
            ignore_unknown_config_file_keys=True,
            **kwargs,
        )

    def add_save_cfgs(self):
        """This function adds saving path arguments: config file, run directory..."""

        group = self.parser.add_argument_group("Config-File")
        group.add(
            "-config_file",
            "--config_file",
            required=False,
            is_config_file_arg=True,
            help="config file path",
        )

        group = self.parser.add_argument_group("Run-Directory")
        group.add(
            "-runs_root",
            "--runs_root",
            type=str,
            default="runs",
            help="directory holding one sub-directory per run.",
        )
        group.add(
            "-run_id",
            "--run_id",
            type=str,
            default="",
            help="run identifier, derived from command and seed when empty.",
        )

    def add_data_cfgs(self):
        """This function adds dataset arguments: dataset name, root path..."""

        self.parser.add(
            "-dataset",
            "--dataset",
            type=str,
            choices=["mnist", "gtsrb", "pubfig"],
            default="mnist",
            help="dataset name.",
        )
        self.parser.add(
            "-data_dir",
            "--data_dir",
            type=str,
            default="data",
            env_var=DATA_ROOT_ENV,
            help="dataset root directory.",
        )
        self.parser.add(
            "-val_size",
            "--val_size",
            type=int,
            default=5000,
            help="validation samples held out from the train split.",
        )
        self.parser.add(
            "-test_batch_size",
            "--test_batch_size",
            type=int,
            default=1000,
            help="batch size during evaluation.",
        )

    def add_model_cfgs(self):
        """This function adds model arguments: architecture and checkpoints"""

        group = self.parser.add_argument_group("Model")
        group.add(
            "-arch_file",
            "--arch_file",
            type=str,
            default="",
            help="JSON architecture spec overriding the built-in one.",
        )
        group.add(
            "-num_classes",
            "--num_classes",
            type=int,
            default=0,
            help="override the number of classes of the built-in spec (0 keeps it).",
        )
        group.add(
            "-teacher_ckpt",
            "--teacher_ckpt",
            type=str,
            default="",
            help="teacher checkpoint directory.",
        )
        group.add(
            "-checkpoint",
            "--checkpoint",
            type=str,
            default="",
            help="student checkpoint directory.",
        )

    def add_optimizer_cfgs(self):
        """This function adds optimizer arguments"""

        self.parser.add(
            "--learning_rate",
            "-learning_rate",
            type=float,
            default=0.001,
            help="Starting learning rate, divided by 10 on plateau.",
        )
        self.parser.add(
            "-lr_patience",
            "--lr_patience",
            type=int,
            default=3,
            help="epochs without validation gain before the learning rate decays.",
        )
        self.parser.add(
            "-lr_min_delta",
            "--lr_min_delta",
            type=float,
            default=0.1,
            help="minimal validation accuracy gain (points) counted as progress.",
        )

        group = self.parser.add_argument_group("Adam")
        group.add("-adam_beta1", "--adam_beta1", type=float, default=0.9)
        group.add("-adam_beta2", "--adam_beta2", type=float, default=0.999)
        group.add("-adam_epsilon", "--adam_epsilon", type=float, default=1e-8)

    def add_run_cfgs(self):
        """This function adds running arguments"""

        group = self.parser.add_argument_group("Training")
        group.add("-seed", "--seed", type=int, default=5216, help="master seed.")
        group.add(
            "-epochs",
            "--epochs",
            type=int,
            default=-1,
            help="training epochs, -1 uses the per-dataset budget.",
        )
        group.add(
            "-teacher_batch_size",
            "--teacher_batch_size",
            type=int,
            default=500,
            help="batch size of teacher training.",
        )
        group.add(
            "-student_batch_size",
            "--student_batch_size",
            type=int,
            default=1000,
            help="student batch size, half raw and half stamped.",
        )
        group.add(
            "-grl_lambda",
            "--grl_lambda",
            type=float,
            default=1.0,
            help="gradient reversal strength.",
        )
        group.add(
            "-grl_warmup",
            "--grl_warmup",
            action="store_true",
            help="ramp the gradient reversal strength from 0 to grl_lambda.",
        )
        group.add(
            "-distill_temperature",
            "--distill_temperature",
            type=float,
            default=1.0,
            help="distillation temperature.",
        )
        group.add(
            "-step_mode",
            "--step_mode",
            type=str,
            choices=["joint", "alternate"],
            default="joint",
            help="joint: one update from both halves; alternate: distill step then SNE step.",
        )
        group.add(
            "-sne_perturbed_fraction",
            "--sne_perturbed_fraction",
            type=float,
            default=0.0,
            help="share of the raw half stamped with a randomly perturbed pattern.",
        )

        group = self.parser.add_argument_group("GPU")
        group.add(
            "-device",
            "--device",
            type=int,
            default=-1,
            help="cpu: device = -1, gpu: gpu device id(device >= 0).",
        )

        group = self.parser.add_argument_group("logging")
        group.add(
            "-root_log_level",
            "--root_log_level",
            type=str,
            action=StoreLoggingLevelAction,
            choices=StoreLoggingLevelAction.CHOICES,
            default="DEBUG",
            help="root logging out level.",
        )
        group.add(
            "-console_log_level",
            "--console_log_level",
            type=str,
            action=StoreLoggingLevelAction,
            choices=StoreLoggingLevelAction.CHOICES,
            default="INFO",
            help="console logging output level.",
        )
        group.add(
            "-log_file",
            "--log_file",
            type=str,
            default="train.log",
            help="logging file name inside the run directory.",
        )
        group.add(
            "-file_log_level",
            "--file_log_level",
            type=str,
            action=StoreLoggingLevelAction,
            choices=StoreLoggingLevelAction.CHOICES,
            default="NOTSET",
            help="file logging output level.",
        )

    def add_sn_cfgs(self):
        """This function adds serial number arguments: owner, geometry, key and certificate"""

        group = self.parser.add_argument_group("Serial-Number")
        group.add("-owner", "--owner", type=str, default="", help="owner name.")
        group.add(
            "-timestamp",
            "--timestamp",
            type=str,
            default="",
            help="ISO-8601 timestamp, now (UTC) when empty.",
        )
        group.add("-rows", "--rows", type=int, default=3, help="pattern rows.")
        group.add("-cols", "--cols", type=int, default=3, help="pattern columns.")
        group.add(
            "-anchor",
            "--anchor",
            type=parse_anchor,
            default="0,0",
            help="pattern anchor as row,col.",
        )
        group.add(
            "-hash_algorithm",
            "--hash_algorithm",
            type=str,
            default="sha256",
            help="hash deriving pattern bits from the signature.",
        )
        group.add(
            "-upscale",
            "--upscale",
            type=int,
            default=1,
            help="integer cell replication factor for high-resolution inputs.",
        )
        group.add(
            "-key_file",
            "--key_file",
            type=str,
            default="",
            help="Ed25519 private key (PEM).",
        )
        group.add(
            "-key_seed",
            "--key_seed",
            type=str,
            default="",
            help="derive the new key from this seed instead of the OS RNG.",
        )
        group.add(
            "-sn_cert",
            "--sn_cert",
            type=str,
            default="",
            help="serial number certificate (JSON).",
        )
        group.add(
            "-out",
            "--out",
            type=str,
            default="",
            help="output path, relative paths resolve inside the run directory.",
        )

    def add_attack_cfgs(self):
        """This function adds attack arguments"""

        group = self.parser.add_argument_group("Attack")
        group.add(
            "-kind",
            "--kind",
            type=str,
            choices=["finetune", "prune", "transfer", "overwrite", "scratch_baseline"],
            default="finetune",
            help="attack kind.",
        )
        group.add(
            "-fraction",
            "--fraction",
            type=float,
            default=0.1,
            help="fraction of training data available to the adversary.",
        )
        group.add(
            "-ratio",
            "--ratio",
            type=float,
            default=0.1,
            help="prune ratio.",
        )
        group.add(
            "-sweep",
            "--sweep",
            action="store_true",
            help="run the full fraction (or ratio) grid.",
        )
        group.add(
            "-new_sn_cert",
            "--new_sn_cert",
            type=str,
            default="",
            help="adversary certificate for the overwriting attack.",
        )
        group.add(
            "-overwrite_mode",
            "--overwrite_mode",
            type=str,
            choices=["three_branch", "two_branch"],
            default="three_branch",
            help="whether raw images join the SNE branch of the overwriting attack.",
        )
        group.add(
            "-attack_batch_size",
            "--attack_batch_size",
            type=int,
            default=500,
            help="batch size of attack training.",
        )
        group.add(
            "-eval_every_steps",
            "--eval_every_steps",
            type=int,
            default=0,
            help="sample the learning curve every n steps (0 disables).",
        )

    def add_eval_cfgs(self):
        """This function adds evaluation and prediction arguments"""

        group = self.parser.add_argument_group("Evaluation")
        group.add(
            "-images",
            "--images",
            type=str,
            default="",
            help="predict on an .npz file (arrays images [N,H,W,C] and optional labels).",
        )
        group.add(
            "-split",
            "--split",
            type=str,
            choices=["train", "test"],
            default="test",
            help="dataset split when no image file is given.",
        )
        group.add(
            "-n_samples",
            "--n_samples",
            type=int,
            default=1000,
            help="number of exported embedding samples.",
        )

    def parse_args(self, args=None):
        """This function parses arguments

        Returns:
            Namespace -- config arguments
        """

        cfg = self.parser.parse_args(args)
        if isinstance(getattr(cfg, "anchor", None), str):
            cfg.anchor = parse_anchor(cfg.anchor)
        return cfg

    def format_values(self):
        return self.parser.format_values()
