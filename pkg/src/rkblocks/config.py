"""Plain-text ``key=value`` experiment configuration.

Every field of :class:`ModelConfig`, :class:`OptimConfig` and
:class:`DataConfig` can be set in the file; command-line flags override
file values.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .data import BUILTIN_CORPORA, Corpus, builtin_text, char_corpus, gen_copy_task, load_text, synthetic_text
from .errors import ConfigError
from .model import ModelConfig
from .optim import OptimConfig


@dataclass
class DataConfig:
    task: str = "copy"  # copy | char
    corpus: str = ""  # char task: a built-in name, a text file, or empty for synthetic text
    copy_length: int = 10
    n_sequences: int = 8000
    valid_fraction: float = 0.1
    max_lines: int = 10000
    data_seed: int = 0

    def __post_init__(self):
        if self.task not in ("copy", "char"):
            raise ConfigError(f"task must be 'copy' or 'char', got {self.task!r}")
        if self.copy_length < 1 or self.n_sequences < 1 or self.max_lines < 2:
            raise ConfigError("copy_length, n_sequences and max_lines must be positive")
        if not 0.0 < self.valid_fraction < 1.0:
            raise ConfigError("valid_fraction must lie in (0, 1)")


@dataclass
class ExperimentConfig:
    model: ModelConfig
    optim: OptimConfig
    data: DataConfig

    def canonical(self) -> str:
        lines = []
        for section in ("model", "optim", "data"):
            for k, v in sorted(dataclasses.asdict(getattr(self, section)).items()):
                lines.append(f"{section}.{k}={v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


SECTIONS = {"model": ModelConfig, "optim": OptimConfig, "data": DataConfig}


def field_types() -> dict:
    """Map every configurable key to (section, type)."""
    out = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            out[f.name] = (section, type(f.default))
    return out


def _convert(key: str, raw: str, typ):
    try:
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes")
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config_text(text: str) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    types = field_types()
    values: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        values[key] = _convert(key, raw, types[key][1])
    return values


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                defaults: Optional[dict] = None) -> ExperimentConfig:
    """Defaults < config file < overrides. ``None`` overrides are ignored."""
    values = dict(defaults or {})
    if path:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    types = field_types()
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in types:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = _convert(k, v, types[k][1]) if isinstance(v, str) else v
    kwargs = {s: {} for s in SECTIONS}
    for k, v in values.items():
        kwargs[types[k][0]][k] = v
    try:
        return ExperimentConfig(ModelConfig(**kwargs["model"]), OptimConfig(**kwargs["optim"]),
                                DataConfig(**kwargs["data"]))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def make_corpus(exp: ExperimentConfig) -> Corpus:
    """Build the corpus and align the model's vocab size / max length with it."""
    d, m = exp.data, exp.model
    if d.task == "copy":
        corpus = gen_copy_task(m.vocab_size, d.copy_length, d.n_sequences, d.data_seed, d.valid_fraction)
    else:
        if d.corpus in BUILTIN_CORPORA:
            lines = builtin_text(d.corpus)
        elif d.corpus:
            lines = load_text(d.corpus)
        else:
            lines = synthetic_text(d.max_lines, seed=d.data_seed)
        corpus = char_corpus(lines, seed=d.data_seed, valid_fraction=d.valid_fraction,
                             max_len=m.max_seq_len + 1, max_lines=d.max_lines)
    if corpus.max_len - 1 > m.max_seq_len:
        raise ConfigError(f"sequences of length {corpus.max_len - 1} exceed max_seq_len {m.max_seq_len}")
    if corpus.vocab_size != m.vocab_size:
        exp.model = dataclasses.replace(m, vocab_size=corpus.vocab_size)
    return corpus
