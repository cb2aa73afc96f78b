"""Run configuration: plain key=value sections (configparser syntax), every
key overridable from the command line as section.key=value. Stage manifests
record input hashes and the config echo so stale artifact mixes are refused.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

ENV_OUT = "RAGLAB_OUT"


@dataclass
class WorldSection:
    n_entities: int = 64
    n_relations: int = 4
    unseen_fraction: float = 0.25
    n_nonce: int = 40
    copy_samples: int = 600


@dataclass
class ModelSection:
    layers: int = 4
    hidden: int = 64
    ffn: int = 128
    heads: int = 4
    max_seq: int = 320


@dataclass
class BaseTrainSection:
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 16


@dataclass
class LoraSection:
    r: int = 2
    alpha: float = 32.0


@dataclass
class PragSection:
    lr: float = 3e-4
    epochs: int = 1
    n_rewrites: int = 1
    m_qa: int = 3
    workers: int = 1


@dataclass
class RetrievalSection:
    c: int = 3
    k1: float = 1.2
    b: float = 0.75


@dataclass
class TranslatorSection:
    p: int = 32
    layer_encoding: str = "normalized"
    embed_pooling: str = "last"


@dataclass
class TranslatorTrainSection:
    lr: float = 1e-5
    epochs: int = 1
    lambda1: float = 100.0
    lambda2: float = 0.01
    splits: str = "seen,align"


@dataclass
class DecodingSection:
    max_new: int = 128
    temperature: float = 1.0
    top_p: float = 0.95
    top_k: int = 20
    samples: int = 5


@dataclass
class CostSection:
    d: float = 600.0
    q: float = 100.0
    qa: float = 50.0
    resp: float = 128.0
    c: int = 3
    layers: int = 28
    hidden: int = 1536
    ffn: int = 8960
    r: int = 2
    p: int = 2
    n_pairs: int = 4800
    m_test: int = 3000
    e1: int = 1
    e2: int = 1
    adapters_per_question: int = 1
    bits: int = 16


@dataclass
class RunSection:
    seed: int = 0
    eval_split: str = "test"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    world: WorldSection = field(default_factory=WorldSection)
    model: ModelSection = field(default_factory=ModelSection)
    base_train: BaseTrainSection = field(default_factory=BaseTrainSection)
    lora: LoraSection = field(default_factory=LoraSection)
    prag: PragSection = field(default_factory=PragSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    translator: TranslatorSection = field(default_factory=TranslatorSection)
    translator_train: TranslatorTrainSection = field(default_factory=TranslatorTrainSection)
    decoding: DecodingSection = field(default_factory=DecodingSection)
    cost: CostSection = field(default_factory=CostSection)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name))
                for name in self.__dataclass_fields__}


def _coerce(current, raw: str):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read the sectioned key=value file (all keys optional) and apply
    section.key=value overrides on top."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        for section in parser.sections():
            if not hasattr(cfg, section):
                raise KeyError(f"unknown config section [{section}]")
            target = getattr(cfg, section)
            for key, raw in parser.items(section):
                if not hasattr(target, key):
                    raise KeyError(f"unknown key {key!r} in section [{section}]")
                setattr(target, key, _coerce(getattr(target, key), raw))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if not hasattr(cfg, section):
            raise KeyError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
        if not hasattr(target, key):
            raise KeyError(f"unknown key {key!r} in section [{section}]")
        setattr(target, key, _coerce(getattr(target, key), raw))
    return cfg


def default_out_dir() -> Path:
    return Path(os.environ.get(ENV_OUT, "out"))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def file_sha256(path) -> str:
    hsh = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            hsh.update(chunk)
    return hsh.hexdigest()


def write_manifest(manifest_path, inputs: dict[str, Path], outputs: dict[str, Path],
                   config: RunConfig) -> None:
    record = {
        "inputs": {name: file_sha256(p) for name, p in inputs.items()},
        "outputs": {name: file_sha256(p) for name, p in outputs.items()},
        "config": config.to_dict(),
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")


class StaleArtifactError(RuntimeError):
    pass


def check_inputs_fresh(manifest_path, inputs: dict[str, Path], force: bool = False) -> None:
    """Refuse to consume inputs whose hashes differ from the ones recorded
    when this stage's outputs were produced (unless forced)."""
    if force or not Path(manifest_path).exists():
        return
    with open(manifest_path, encoding="utf-8") as fh:
        record = json.load(fh)
    recorded = record.get("inputs", {})
    for name, p in inputs.items():
        if name in recorded and Path(p).exists():
            current = file_sha256(p)
            if current != recorded[name]:
                raise StaleArtifactError(
                    f"input {name} ({p}) changed since this artifact was built; "
                    f"re-run the producing stage or pass --force")
