"""Run configuration files: ``[section]`` headers and ``key = value`` lines.

Parsing is strict.  Unknown sections or keys, duplicates and malformed values
are fatal and reported with the offending line number.  Indented lines
continue the previous value, which is convenient for the layer list::

    [model]
    layers = conv 8 k=3 pad=1 relu;
             conv 8 k=3 pad=1 relu maxpool:2;
             dense 10
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .attacks import AttackConfig
from .data import Dataset, load_cifar_binary, load_idx, synth_dataset
from .errors import ClatError, ConfigError
from .network import Network, build_network, parse_layer
from .trainer import TrainConfig

DESK_LAYERS = (
    "conv 8 k=3 pad=1 relu",
    "conv 8 k=3 pad=1 relu maxpool:2",
    "conv 16 k=3 pad=1 relu",
    "conv 16 k=3 pad=1 relu maxpool:2",
    "dense 32 relu",
    "dense 10",
)


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple = DESK_LAYERS
    input_shape: tuple = (1, 12, 12)
    num_classes: int = 10

    def build(self, seed: int = 0) -> Network:
        return build_network(list(self.layers), self.input_shape, self.num_classes, seed=seed)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"  # synth | idx | cifar
    seed: int = 0  # synthetic data only; training randomness follows [train] seed
    n_train: int = 1000
    n_test: int = 500
    size: int = 12
    noise: float = 0.1
    waveform: str = "sine"
    amplitude: tuple = (0.3, 0.45)
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: tuple = ()
    test_files: tuple = ()
    limit_train: int = 0  # 0 keeps every sample
    limit_test: int = 0

    def load(self, num_classes: int, channels: int = 1) -> tuple[Dataset, Dataset]:
        if self.source == "synth":
            kw = dict(noise=self.noise, channels=channels, amplitude=self.amplitude, waveform=self.waveform)
            train = synth_dataset(num_classes, self.n_train, self.size, seed=self.seed, **kw)
            test = synth_dataset(num_classes, self.n_test, self.size, seed=self.seed + 1_000_003,
                                 split="test", **kw)
        elif self.source == "idx":
            train = load_idx(self.train_images, self.train_labels, num_classes, "train")
            test = load_idx(self.test_images, self.test_labels, num_classes, "test")
        else:
            train = load_cifar_binary(list(self.train_files), num_classes, "train")
            test = load_cifar_binary(list(self.test_files), num_classes, "test")
        return train.head(self.limit_train), test.head(self.limit_test)


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs"
    metrics: str = "metrics.csv"
    checkpoint: str = "model.cltf"
    evaluate: bool = True  # per-epoch clean/PGD accuracy on the test split


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source: str = "<defaults>"

    @property
    def attack(self) -> AttackConfig:
        return self.train.attack

    def with_train(self, **changes) -> "RunConfig":
        return replace(self, train=replace(self.train, **changes))

    def to_text(self) -> str:
        """Fully resolved configuration in the same file format."""
        lines = ["[model]", "layers = " + ";\n    ".join(self.model.layers),
                 "input_shape = " + ",".join(map(str, self.model.input_shape)),
                 f"num_classes = {self.model.num_classes}", "", "[data]"]
        for f in fields(DataConfig):
            lines.append(f"{f.name} = {_format(getattr(self.data, f.name))}")
        lines += ["", "[train]"]
        for f in fields(TrainConfig):
            if f.name != "attack":
                key = "lambda" if f.name == "lam" else f.name
                lines.append(f"{key} = {_format(getattr(self.train, f.name))}")
        lines += ["", "[attack]"]
        for f in fields(AttackConfig):
            lines.append(f"{f.name} = {_format(getattr(self.attack, f.name))}")
        lines += ["", "[output]"]
        for f in fields(OutputConfig):
            lines.append(f"{f.name} = {_format(getattr(self.output, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(map(str, value))
    return str(value)


# key -> value converter; section order is the order of the echo
def _int(s):
    return int(s)


def _opt_int(s):
    return None if s.lower() in ("none", "auto", "") else int(s)


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(s):
    return tuple(int(v) for v in s.split(","))


def _floats(s):
    return tuple(float(v) for v in s.split(","))


def _paths(s):
    return tuple(p.strip() for p in re.split(r"[,\n]", s) if p.strip())


def _layers(s):
    items = tuple(" ".join(p.split()) for p in re.split(r"[;\n]", s) if p.strip())
    for item in items:
        parse_layer(item)
    return items


def _choice(*options):
    def conv(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return conv


SCHEMA = {
    "model": {"layers": _layers, "input_shape": _ints, "num_classes": _int},
    "data": {"source": _choice("synth", "idx", "cifar"), "seed": _int, "n_train": _int, "n_test": _int,
             "size": _int, "noise": float, "waveform": _choice("sine", "square"), "amplitude": _floats, "train_images": str, "train_labels": str, "test_images": str,
             "test_labels": str, "train_files": _paths, "test_files": _paths, "limit_train": _int,
             "limit_test": _int},
    "train": {"epochs": _int, "pretrain_epochs": _int, "reselect_period": _int, "k": _opt_int,
              "lambda": float, "lr0": float, "momentum": float, "batch_size": _int, "seed": _int,
              "crit_batch_size": _int, "pretrain_mode": _choice("pgd", "clean"), "fixed_layers": _bool,
              "fast": _bool, "ce_on_adversarial": _bool, "restart_schedule": _bool, "eps_warmup": _int,
              "lr_warmup": _int},
    "attack": {"epsilon": float, "alpha": float, "steps": _int, "norm": _choice("linf", "l2"),
               "random_start": _bool, "domain": _floats},
    "output": {"dir": str, "metrics": str, "checkpoint": str, "evaluate": _bool},
}


def _locate(lines: list, section: str, key: str | None = None) -> int | None:
    """1-based line of ``[section]`` (or of ``key`` inside it)."""
    current = None
    for n, raw in enumerate(lines, start=1):
        text = raw.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", text)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and not raw[:1].isspace():
            name = re.split(r"[=:]", text, maxsplit=1)[0].strip()
            if name == key:
                return n
    return None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True, delimiters=("=",),
                                       comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       empty_lines_in_values=False, default_section="\0none")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("expected a [section] header before the first key", exc.lineno, source) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        what = f"key {exc.option!r}" if hasattr(exc, "option") else f"section [{exc.section}]"
        raise ConfigError(f"duplicate {what}", exc.lineno, source) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"cannot parse line {line.strip()!r}; expected 'key = value'", lineno,
                          source) from None

    lines = text.splitlines()
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of "
                              + ", ".join(f"[{s}]" for s in SCHEMA), _locate(lines, section), source)
        for key, raw in parser.items(section):
            line = _locate(lines, section, key)
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of "
                                  + ", ".join(SCHEMA[section]), line, source)
            try:
                values[section, key] = SCHEMA[section][key](raw.strip())
            except (ValueError, ClatError) as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}", line, source) from None
    return _assemble(values, source, lines)


def _assemble(values: dict, source: str, lines: list) -> RunConfig:
    def pick(section):
        return {k: v for (s, k), v in values.items() if s == section}

    def build(section, cls, **extra):
        try:
            return cls(**pick(section), **extra)
        except (ValueError, TypeError, ClatError) as exc:
            raise ConfigError(f"invalid [{section}] block: {exc}", _locate(lines, section), source) from None

    model = build("model", ModelConfig)
    attack = build("attack", AttackConfig)
    train_values = pick("train")
    if "lambda" in train_values:
        train_values["lam"] = train_values.pop("lambda")
    try:
        train = TrainConfig(attack=attack, **train_values)
    except (ValueError, ClatError) as exc:
        raise ConfigError(f"invalid [train] block: {exc}", _locate(lines, "train"), source) from None
    data = build("data", DataConfig)
    if data.source == "idx" and not all((data.train_images, data.train_labels,
                                         data.test_images, data.test_labels)):
        raise ConfigError("source = idx needs train_images, train_labels, test_images and test_labels",
                          _locate(lines, "data"), source)
    if data.source == "cifar" and not (data.train_files and data.test_files):
        raise ConfigError("source = cifar needs train_files and test_files", _locate(lines, "data"), source)
    try:
        model.build(seed=0)
    except ClatError as exc:
        raise ConfigError(f"invalid [model] block: {exc}", _locate(lines, "model"), source) from None
    return RunConfig(model, data, train, build("output", OutputConfig), source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    return parse_config(text, str(path))
