"""Run configuration: one YAML tree covering cohort, training, losses,
generator, encoders, and ablation switches.

Unknown keys are rejected (typos must not silently fall back to
defaults), and the canonical hash of the fully resolved tree is embedded
in every artifact, so identical hashes imply byte-identical outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .encoders import EncoderConfig
from .losses import LossConfig
from .mmg import MmgConfig
from .synthdata import CohortConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/out"

    def validate(self):
        try:
            self.cohort.validate()
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self


# YAML section name -> (attribute path, dataclass type)
_SECTIONS = {
    "cohort": ("cohort", CohortConfig),
    "train": ("train", TrainConfig),
    "loss": ("train.loss", LossConfig),
    "mmg": ("train.mmg", MmgConfig),
    "encoders": ("train.enc", EncoderConfig),
}
_TOP_KEYS = set(_SECTIONS) | {"ablation", "out_dir"}
# nested dataclasses get their own sections; ablation flags their own block
_HIDDEN_FIELDS = {"loss", "mmg", "enc", "use_mmg", "use_tcaf"}


def _apply_section(obj, values, section):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, val in values.items():
        if key not in fields or key in _HIDDEN_FIELDS:
            known = sorted(set(fields) - _HIDDEN_FIELDS)
            raise ConfigError(f"unknown key {section}.{key}; known keys: {known}")
        if key == "volume_shape":
            val = tuple(int(v) for v in val)
        if key == "alpha_focal" and val is not None:
            val = tuple(float(v) for v in val)
        setattr(obj, key, val)


def from_dict(tree):
    """Build a validated RunConfig from a parsed YAML tree."""
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"config root must be a mapping, got {type(tree).__name__}")
    unknown = sorted(set(tree) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}; known: {sorted(_TOP_KEYS)}")
    cfg = RunConfig()
    for section, (path, _) in _SECTIONS.items():
        values = tree.get(section) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        obj = cfg
        *parents, leaf = path.split(".")
        for p in parents:
            obj = getattr(obj, p)
        _apply_section(getattr(obj, leaf), values, section)
    ablation = tree.get("ablation") or {}
    if not isinstance(ablation, dict):
        raise ConfigError("section 'ablation' must be a mapping")
    for key, val in ablation.items():
        if key not in ("use_mmg", "use_tcaf"):
            raise ConfigError(f"unknown key ablation.{key}; known keys: ['use_mmg', 'use_tcaf']")
        setattr(cfg.train, key, bool(val))
    if "out_dir" in tree:
        cfg.out_dir = str(tree["out_dir"])
    return cfg.validate()


def to_dict(cfg: RunConfig):
    """Fully resolved tree (every key explicit), inverse of from_dict."""
    def section(obj, skip=()):
        out = {}
        for f in dataclasses.fields(obj):
            if f.name in skip:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    return {
        "cohort": section(cfg.cohort),
        "train": section(cfg.train, skip=("loss", "mmg", "enc", "use_mmg", "use_tcaf")),
        "loss": section(cfg.train.loss),
        "mmg": section(cfg.train.mmg),
        "encoders": section(cfg.train.enc),
        "ablation": {"use_mmg": cfg.train.use_mmg, "use_tcaf": cfg.train.use_tcaf},
        "out_dir": cfg.out_dir,
    }


def load_config(path):
    with open(path, encoding="utf-8") as f:
        try:
            tree = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    return from_dict(tree)


def dump_defaults():
    """Canonical YAML text of the full default configuration."""
    return yaml.safe_dump(to_dict(RunConfig()), sort_keys=True, default_flow_style=False)


def config_hash(cfg: RunConfig):
    """Short stable hash of the resolved config tree.

    The output directory is excluded: the hash identifies the experiment,
    and the same experiment written to two locations must match.
    """
    tree = to_dict(cfg)
    tree.pop("out_dir", None)
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
