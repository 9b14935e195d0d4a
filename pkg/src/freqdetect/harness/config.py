"""Experiment configuration: flat ``key = value`` text, repeated keys build lists.

Lines starting with ``#`` are comments. Epsilons may be written as fractions
(``8/255``). ``freqdetect --print-config`` prints every key with its default.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from fractions import Fraction

from ..errors import ConfigError

LIST_KEYS = ("cifar_train", "cifar_test", "attack", "epsilon", "mode", "layer", "detector", "study_layer")

_DOC = {
    "dataset": "synthetic | cifar",
    "cifar_train": "CIFAR-10 binary batch used to train the target net (repeatable)",
    "cifar_test": "CIFAR-10 binary batch whose samples are attacked (repeatable)",
    "synth_classes": "synthetic: number of classes",
    "synth_per_class": "synthetic: images per class",
    "synth_size": "synthetic: image side length",
    "net_test_fraction": "synthetic: held-out fraction for the target net",
    "net_epochs": "target net SGD epochs",
    "net_lr": "target net SGD learning rate",
    "net_batch": "target net minibatch size",
    "attack": "attack in cascade order: pgd | square | fgsm (repeatable)",
    "epsilon": "L-inf budget, e.g. 8/255 (repeatable)",
    "pgd_steps": "PGD iterations",
    "pgd_step_fraction": "PGD step size as a fraction of epsilon",
    "pgd_random_start": "PGD uniform start inside the eps-ball",
    "square_steps": "square attack proposals",
    "max_attack_samples": "cap on correctly classified test samples that get attacked",
    "mode": "black | white (repeatable)",
    "layer": "white-box layer, in concatenation order (repeatable)",
    "study_layer": "layers for layer-study; empty means every spatial layer (repeatable)",
    "detector": "rf | lr (repeatable)",
    "rf_trees": "random forest size",
    "lr_iterations": "logistic regression gradient steps",
    "lr_rate": "logistic regression learning rate",
    "lr_l2": "logistic regression L2 strength",
    "log_scale": "use log(1 + magnitude) features",
    "quantize_8bit": "round images to 8 bits before feature extraction",
    "seed": "master seed",
    "out": "output directory",
}


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    cifar_train: list = field(default_factory=list)
    cifar_test: list = field(default_factory=list)
    synth_classes: int = 2
    synth_per_class: int = 500
    synth_size: int = 32
    net_test_fraction: float = 0.2
    net_epochs: int = 30
    net_lr: float = 0.01
    net_batch: int = 4
    attack: list = field(default_factory=lambda: ["pgd", "square"])
    epsilon: list = field(default_factory=lambda: ["8/255"])
    pgd_steps: int = 40
    pgd_step_fraction: float = 0.25
    pgd_random_start: bool = True
    square_steps: int = 300
    max_attack_samples: int = 200
    mode: list = field(default_factory=lambda: ["black", "white"])
    layer: list = field(default_factory=lambda: ["relu1", "relu2", "relu3"])
    study_layer: list = field(default_factory=list)
    detector: list = field(default_factory=lambda: ["rf", "lr"])
    rf_trees: int = 100
    lr_iterations: int = 500
    lr_rate: float = 0.1
    lr_l2: float = 1e-4
    log_scale: bool = False
    quantize_8bit: bool = False
    seed: int = 0
    out: str = "runs/default"

    @property
    def epsilons(self):
        return [parse_epsilon(e) for e in self.epsilon]

    def validate(self, layer_names=None):
        if self.dataset not in ("synthetic", "cifar"):
            raise ConfigError(f"dataset must be 'synthetic' or 'cifar', got '{self.dataset}'")
        if self.dataset == "cifar" and not (self.cifar_train and self.cifar_test):
            raise ConfigError("dataset=cifar needs cifar_train and cifar_test paths")
        if not self.epsilon:
            raise ConfigError("epsilon list is empty")
        for e in self.epsilons:
            if not 0.0 < e <= 1.0:
                raise ConfigError(f"epsilon {e} outside (0, 1]")
        if not self.attack:
            raise ConfigError("attack list is empty")
        for a in self.attack:
            if a not in ("pgd", "square", "fgsm"):
                raise ConfigError(f"unknown attack '{a}'")
        for m in self.mode:
            if m not in ("black", "white"):
                raise ConfigError(f"unknown mode '{m}'")
        for d in self.detector:
            if d not in ("rf", "lr"):
                raise ConfigError(f"unknown detector '{d}'")
        if not self.mode or not self.detector:
            raise ConfigError("mode and detector lists must not be empty")
        if "white" in self.mode and not self.layer:
            raise ConfigError("white-box mode needs at least one layer")
        if layer_names is not None:
            for name in list(self.layer) + list(self.study_layer):
                if name not in layer_names:
                    raise ConfigError(f"layer '{name}' not in architecture {layer_names}")
        for key in ("synth_classes", "synth_per_class", "synth_size", "net_epochs", "net_batch",
                    "pgd_steps", "square_steps", "max_attack_samples", "rf_trees", "lr_iterations"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.synth_classes < 2:
            raise ConfigError("synth_classes must be >= 2")
        return self


def parse_epsilon(text):
    """'8/255' -> 8/255, '0.5/255' -> 0.5/255, '0.03' -> 0.03."""
    try:
        num, _, den = str(text).strip().partition("/")
        return float(Fraction(num) / Fraction(den or "1"))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse epsilon '{text}'") from None


def epsilon_tag(text):
    """Filesystem-safe label: '8/255' -> '8-255', '0.5/255' -> '0.5-255'."""
    return str(text).strip().replace("/", "-")


def _convert(name, kind, raw):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got '{raw}'")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse '{raw}' as {kind.__name__}") from None


def parse_config(text, base=None):
    """Apply ``key = value`` lines on top of ``base`` (defaults if None)."""
    cfg = base or ExperimentConfig()
    types = {f.name: type(getattr(ExperimentConfig(), f.name)) for f in fields(ExperimentConfig)}
    seen_lists = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in LIST_KEYS:
            if key not in seen_lists:
                setattr(cfg, key, [])
                seen_lists.add(key)
            if value:
                getattr(cfg, key).append(value)
        else:
            setattr(cfg, key, _convert(key, types[key], value))
    return cfg


def load_config(path, base=None):
    try:
        with open(path, encoding="utf-8") as f:
            return parse_config(f.read(), base)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def format_config(cfg, with_docs=False):
    lines = []
    for f in fields(cfg):
        if with_docs:
            lines.append(f"# {_DOC.get(f.name, '')}")
        value = getattr(cfg, f.name)
        if f.name in LIST_KEYS:
            if not value:
                lines.append(f"{f.name} =")
            lines.extend(f"{f.name} = {v}" for v in value)
        elif isinstance(value, bool):
            lines.append(f"{f.name} = {'true' if value else 'false'}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def stage_seed(master, stage):
    """64-bit seed for one pipeline stage: sha256 of ``"<master>:<stage>"``."""
    digest = hashlib.sha256(f"{int(master)}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
