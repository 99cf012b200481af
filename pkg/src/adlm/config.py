"""Run configuration: a flat YAML/JSON mapping over training, data and output keys."""
import os
from dataclasses import dataclass, fields

import yaml

from adlm.trainer import TrainConfig

DATA_DIR_ENV = "ADLM_DATA_DIR"
DEFAULT_DATA_DIR = os.path.join("data", "mnist-10k")


class ConfigError(ValueError):
    pass


KEY_DOCS = {
    "mechanism": "adlm | ilm | noiseless",
    "epsilon": "total privacy budget (> 0)",
    "epsilon_split": "relative shares of epsilon for relevance, features, loss (default equal thirds)",
    "batch_size": "batch size |L|; also enters every noise scale",
    "epochs": "training epochs; steps = epochs * floor(n / batch_size)",
    "lr": "learning rate applied to the batch-mean gradient",
    "lr_decay": "multiplicative learning-rate decay per epoch",
    "seed": "root seed for all random substreams",
    "arch": "layer tokens: dense:U conv:C:K[:S[:P]] relu sigmoid flatten lrn lrn_conv[:q:l:alpha:beta]",
    "pretrain_arch": "layer tokens of the relevance model (default: same as arch)",
    "pretrain_epochs": "epochs of noiseless pretraining for relevance",
    "pretrain_lr": "pretraining learning rate (default: lr)",
    "mu": "relevance stabilizer (>= 0)",
    "normalization": "per-example relevance rescale: symmetric ([-1, 1]) | unit ([0, 1])",
    "loss": "taylor | exact (exact only for the noiseless baseline)",
    "ratio_floor": "lower bound on budget ratios before renormalizing",
    "noise_multiplier": "scales every preprocessing noise draw (0 disables noise)",
    "uniform_relevance": "skip the relevance release and split the feature budget uniformly",
    "eval_every": "evaluate test accuracy every this many epochs",
    "dataset": "mnist | synthetic",
    "data_dir": f"directory with IDX files (default ${DATA_DIR_ENV} or {DEFAULT_DATA_DIR})",
    "out_dir": "directory for checkpoints, metrics, manifests and reports",
    "synthetic_n": "synthetic dataset size (80% train, 20% test)",
    "synthetic_d": "synthetic feature count",
    "synthetic_classes": "synthetic class count",
    "audit_records": "dataset size |D| assumed by the audit's configured-scale checks",
    "audit_trials": "Monte Carlo trials per audit histogram",
}


@dataclass
class RunConfig(TrainConfig):
    dataset: str = "mnist"
    data_dir: str = None
    out_dir: str = "runs/default"
    synthetic_n: int = 2000
    synthetic_d: int = 16
    synthetic_classes: int = 3
    audit_records: int = 8000
    audit_trials: int = 100_000

    def __post_init__(self):
        super().__post_init__()
        if self.data_dir is None:
            self.data_dir = os.environ.get(DATA_DIR_ENV, DEFAULT_DATA_DIR)
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError(f"dataset must be mnist or synthetic, got {self.dataset!r}")

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.to_dict().items() if k in names})

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **overrides):
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return RunConfig.from_dict({**self.to_dict(), **overrides})


def parse_config(text):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    return RunConfig.from_dict(data or {})


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def help_text():
    defaults = RunConfig(data_dir=DEFAULT_DATA_DIR).to_dict()
    width = max(len(k) for k in KEY_DOCS)
    lines = ["config keys (YAML or JSON mapping; flags override file values):"]
    for k in (f.name for f in fields(RunConfig)):
        lines.append(f"  {k:<{width}}  {KEY_DOCS[k]} [default: {defaults[k]}]")
    return "\n".join(lines)

