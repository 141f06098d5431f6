"""Experiment configuration: INI file -> typed objects -> runtime data.

Sections: [model], [protocol], [hyperband], [combine], [run], plus one
[dataset:NAME] per dataset (synthetic family or TSV path) and one
[pair:NAME] per shift. Unknown sections or keys are errors, so typos
fail loudly with the section and field named.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, replace

from .ewc import DEFAULT_LAMBDA
from .model import ModelConfig, init_params
from .protocol import DEFAULT_FLAT_LR, dataset_cls_embeddings
from .shifts import FAMILIES, Dataset, ShiftSpec, load_tsv, make_pair, synth_task

_NAME_RE = re.compile(r"^[A-Za-z0-9_-]+$")


class ConfigError(Exception):
    """Unreadable, malformed, or inconsistent experiment configuration."""


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    family: str | None = None
    seed: int = 999
    size: int = 2500
    min_len: int = 15
    max_len: int = 15
    path: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    epochs_o: int = 5
    epochs_s: int = 5
    batch_size: int = 16
    ewc_lambda: float = DEFAULT_LAMBDA
    fisher_samples: int = 64
    retain_moments: bool = False
    phase2_only: bool = False
    flat_lr: float = DEFAULT_FLAT_LR
    max_resource: int = 27
    eta: int = 3
    b: float = 1.8
    seed: int = 999
    out: str = "runs"
    workers: int = 1
    datasets: tuple[DatasetSpec, ...] = ()
    pairs: tuple[ShiftSpec, ...] = ()


_KNOWN_KEYS = {
    "model": {
        "vocab_size",
        "max_seq_len",
        "d_model",
        "n_heads",
        "n_layers",
        "d_ff",
        "n_classes",
        "seed",
    },
    "protocol": {
        "epochs_o",
        "epochs_s",
        "batch_size",
        "ewc_lambda",
        "fisher_samples",
        "retain_moments",
        "phase2_only",
        "flat_lr",
    },
    "hyperband": {"max_resource", "eta"},
    "combine": {"b"},
    "run": {"seed", "out", "workers"},
    "dataset": {"family", "seed", "size", "min_len", "max_len", "path"},
    "pair": {"kind", "o", "s", "source", "seed"},
}


class _Section:
    def __init__(self, path: str, name: str, items: dict[str, str], known: set[str]):
        self.path = path
        self.name = name
        self.items = items
        unknown = sorted(set(items) - known)
        if unknown:
            raise ConfigError(
                f"{path}: [{name}] unknown key(s) {unknown}; known: {sorted(known)}"
            )

    def _convert(self, key: str, conv, default):
        if key not in self.items:
            return default
        raw = self.items[key]
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{self.path}: [{self.name}] {key} = {raw!r}: {exc}") from exc

    def get_int(self, key: str, default: int | None = None) -> int:
        return self._convert(key, int, default)

    def get_float(self, key: str, default: float | None = None) -> float:
        return self._convert(key, float, default)

    def get_bool(self, key: str, default: bool | None = None) -> bool:
        def conv(raw: str) -> bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")

        return self._convert(key, conv, default)

    def get_str(self, key: str, default: str | None = None) -> str | None:
        return self._convert(key, str.strip, default)

    def require(self, key: str) -> str:
        if key not in self.items:
            raise ConfigError(f"{self.path}: [{self.name}] missing required key {key!r}")
        return self.items[key].strip()


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (configparser.Error, OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc

    sections: dict[str, _Section] = {}
    datasets: list[DatasetSpec] = []
    pair_sections: list[tuple[str, _Section]] = []
    for raw_name in parser.sections():
        items = dict(parser.items(raw_name))
        if raw_name in ("model", "protocol", "hyperband", "combine", "run"):
            sections[raw_name] = _Section(path, raw_name, items, _KNOWN_KEYS[raw_name])
        elif raw_name.startswith("dataset:"):
            name = raw_name[len("dataset:") :]
            if not _NAME_RE.match(name):
                raise ConfigError(f"{path}: bad dataset name {name!r} (use [A-Za-z0-9_-])")
            sec = _Section(path, raw_name, items, _KNOWN_KEYS["dataset"])
            datasets.append(_parse_dataset(path, name, sec))
        elif raw_name.startswith("pair:"):
            name = raw_name[len("pair:") :]
            if not _NAME_RE.match(name):
                raise ConfigError(f"{path}: bad pair name {name!r} (use [A-Za-z0-9_-])")
            pair_sections.append((name, _Section(path, raw_name, items, _KNOWN_KEYS["pair"])))
        else:
            raise ConfigError(f"{path}: unknown section [{raw_name}]")

    empty = _Section(path, "-", {}, set())
    run = sections.get("run", empty)
    seed = run.get_int("seed", 999)

    model_sec = sections.get("model", empty)
    try:
        model = ModelConfig(
            vocab_size=model_sec.get_int("vocab_size", 64),
            max_seq_len=model_sec.get_int("max_seq_len", 16),
            d_model=model_sec.get_int("d_model", 32),
            n_heads=model_sec.get_int("n_heads", 2),
            n_layers=model_sec.get_int("n_layers", 12),
            d_ff=model_sec.get_int("d_ff", 64),
            n_classes=model_sec.get_int("n_classes", 2),
            seed=model_sec.get_int("seed", seed),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: [model]: {exc}") from exc

    protocol = sections.get("protocol", empty)
    hyper = sections.get("hyperband", empty)
    comb = sections.get("combine", empty)

    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ConfigError(f"{path}: duplicate dataset names")

    pairs = []
    for name, sec in pair_sections:
        pairs.append(_parse_pair(path, name, sec, seed, set(names)))
    if len({p.name for p in pairs}) != len(pairs):
        raise ConfigError(f"{path}: duplicate pair names")

    cfg = ExperimentConfig(
        model=model,
        epochs_o=protocol.get_int("epochs_o", 5),
        epochs_s=protocol.get_int("epochs_s", 5),
        batch_size=protocol.get_int("batch_size", 16),
        ewc_lambda=protocol.get_float("ewc_lambda", DEFAULT_LAMBDA),
        fisher_samples=protocol.get_int("fisher_samples", 64),
        retain_moments=protocol.get_bool("retain_moments", False),
        phase2_only=protocol.get_bool("phase2_only", False),
        flat_lr=protocol.get_float("flat_lr", DEFAULT_FLAT_LR),
        max_resource=hyper.get_int("max_resource", 27),
        eta=hyper.get_int("eta", 3),
        b=comb.get_float("b", 1.8),
        seed=seed,
        out=run.get_str("out", "runs"),
        workers=run.get_int("workers", 1),
        datasets=tuple(datasets),
        pairs=tuple(pairs),
    )
    _validate(path, cfg)
    return cfg


def _parse_dataset(path: str, name: str, sec: _Section) -> DatasetSpec:
    family = sec.get_str("family")
    tsv = sec.get_str("path")
    if (family is None) == (tsv is None):
        raise ConfigError(
            f"{path}: [dataset:{name}] needs exactly one of 'family' or 'path'"
        )
    if family is not None and family not in FAMILIES:
        raise ConfigError(
            f"{path}: [dataset:{name}] unknown family {family!r}; known: {FAMILIES}"
        )
    if tsv is not None and not os.path.isabs(tsv):
        tsv = os.path.join(os.path.dirname(os.path.abspath(path)), tsv)
    spec = DatasetSpec(
        name=name,
        family=family,
        seed=sec.get_int("seed", 999),
        size=sec.get_int("size", 2500),
        min_len=sec.get_int("min_len", 15),
        max_len=sec.get_int("max_len", 15),
        path=tsv,
    )
    if spec.size < 10:
        raise ConfigError(f"{path}: [dataset:{name}] size must be >= 10")
    if not 1 <= spec.min_len <= spec.max_len:
        raise ConfigError(f"{path}: [dataset:{name}] bad length range")
    return spec


def _parse_pair(
    path: str, name: str, sec: _Section, default_seed: int, known: set[str]
) -> ShiftSpec:
    kind = sec.require("kind")
    if kind == "dataset-pair":
        sources = (sec.require("o"), sec.require("s"))
    elif kind in ("sentence-length", "artificial"):
        sources = (sec.require("source"),)
    else:
        raise ConfigError(
            f"{path}: [pair:{name}] unknown kind {kind!r}; "
            "known: dataset-pair, sentence-length, artificial"
        )
    for src in sources:
        if src not in known:
            raise ConfigError(
                f"{path}: [pair:{name}] references unknown dataset {src!r}"
            )
    try:
        return ShiftSpec(
            name=name, kind=kind, sources=sources, seed=sec.get_int("seed", default_seed)
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: [pair:{name}]: {exc}") from exc


def _validate(path: str, cfg: ExperimentConfig) -> None:
    if cfg.epochs_o < 1 or cfg.epochs_s < 1:
        raise ConfigError(f"{path}: [protocol] epochs must be >= 1")
    if cfg.batch_size < 1:
        raise ConfigError(f"{path}: [protocol] batch_size must be >= 1")
    if cfg.flat_lr <= 0:
        raise ConfigError(f"{path}: [protocol] flat_lr must be > 0")
    if cfg.ewc_lambda < 0:
        raise ConfigError(f"{path}: [protocol] ewc_lambda must be >= 0")
    if cfg.fisher_samples < 1:
        raise ConfigError(f"{path}: [protocol] fisher_samples must be >= 1")
    if cfg.max_resource < 1:
        raise ConfigError(f"{path}: [hyperband] max_resource must be >= 1")
    if cfg.eta < 2:
        raise ConfigError(f"{path}: [hyperband] eta must be >= 2")
    if cfg.b < 1:
        raise ConfigError(f"{path}: [combine] b must be >= 1")
    if cfg.seed < 0:
        raise ConfigError(f"{path}: [run] seed must be >= 0")
    if cfg.workers < 1:
        raise ConfigError(f"{path}: [run] workers must be >= 1")
    for ds in cfg.datasets:
        if ds.family is not None and ds.max_len > cfg.model.max_seq_len:
            raise ConfigError(
                f"{path}: [dataset:{ds.name}] max_len {ds.max_len} exceeds "
                f"model max_seq_len {cfg.model.max_seq_len}"
            )


def reseed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Rebind the whole experiment (model init included) to one seed."""
    return replace(cfg, seed=seed, model=replace(cfg.model, seed=seed))


def materialize_datasets(cfg: ExperimentConfig) -> dict[str, Dataset]:
    out: dict[str, Dataset] = {}
    for spec in cfg.datasets:
        if spec.path is not None:
            try:
                out[spec.name] = load_tsv(spec.path, name=spec.name)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"[dataset:{spec.name}]: {exc}") from exc
        else:
            out[spec.name] = synth_task(
                spec.family,
                spec.seed,
                size=spec.size,
                min_len=spec.min_len,
                max_len=spec.max_len,
                name=spec.name,
            )
    return out


def materialize_pairs(cfg: ExperimentConfig, datasets: dict[str, Dataset]):
    """Build every TaskPair; the artificial shift embeds with the init model."""
    embed_params = None

    def embed(ds: Dataset):
        nonlocal embed_params
        if embed_params is None:
            embed_params = init_params(cfg.model)
        return dataset_cls_embeddings(cfg.model, embed_params, ds)

    pairs = []
    for spec in cfg.pairs:
        try:
            pairs.append(make_pair(spec, datasets, embed_fn=embed))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"[pair:{spec.name}]: {exc}") from exc
    return pairs
