"""Pipeline configuration: an INI file with one section per stage."""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data: str = ""  # ratings.dat for source = movielens
    workdir: str = "work"


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | movielens
    min_item_count: int = 5
    min_seq_len: int = 5
    train_frac: float = 0.8
    n_future: int = 10
    short_term: int = 20
    long_term: int = 30


@dataclass
class SynthConfig:
    levels: int = 2
    branching: int = 4
    items_per_leaf: int = 50
    users: int = 1000
    interests_per_user: int = 3
    seq_len: int = 40
    noise_frac: float = 0.1
    dim: int = 16
    taste_strength: float = 2.0


@dataclass
class EmbeddingConfig:
    dim: int = 32
    window: int = 5
    iters: int = 10


@dataclass
class TaxonomyConfig:
    k: int = 4
    c: int = 250
    kmeans_iters: int = 50


@dataclass
class MinerConfig:
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 128
    prefix_aug: float = 0.3
    min_leaf_hits: int = 2
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 64
    kkv_beam_size: int = 4  # interests decoded for training users


@dataclass
class RetrievalConfig:
    d_emb: int = 64
    negatives: int = 5
    epochs: int = 5
    lr: float = 1e-3
    batch: int = 256
    max_positives: int = 10
    baseline_max_positives: int = 30


@dataclass
class EvalSection:
    beam_sizes: tuple[int, ...] = (2,)
    m_list: tuple[int, ...] = (20, 50)
    arms: tuple[str, ...] = ("full", "whole_library", "unified_sequence", "baseline")


@dataclass
class RunConfig:
    seed: int = 0


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    embeddings: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    taxonomy: TaxonomyConfig = field(default_factory=TaxonomyConfig)
    miner: MinerConfig = field(default_factory=MinerConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunConfig = field(default_factory=RunConfig)

    def section(self, name: str):
        return getattr(self, name)

    def snapshot(self, *sections: str) -> dict:
        names = sections or [f.name for f in fields(self)]
        return {n: _jsonable(asdict(getattr(self, n))) for n in names}

    def stage_seed(self, stage: str) -> int:
        digest = hashlib.sha256(f"{self.run.seed}:{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "little")

    def set(self, dotted: str, value: str) -> None:
        try:
            sec, key = dotted.split(".", 1)
        except ValueError:
            raise ConfigError(f"override {dotted!r} must look like section.key") from None
        if not hasattr(self, sec):
            raise ConfigError(f"unknown config section {sec!r}")
        obj = getattr(self, sec)
        if key not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config field {sec}.{key}")
        setattr(obj, key, _coerce(getattr(obj, key), value, f"{sec}.{key}"))

    def validate(self, check_paths: bool = True) -> None:
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                v = getattr(obj, f.name)
                where = f"{sec.name}.{f.name}"
                if isinstance(v, bool):
                    continue
                if isinstance(v, int) and v < (0 if f.name == "seed" else 1):
                    raise ConfigError(f"{where} must be >= 1, got {v}")
                if isinstance(v, tuple) and not v:
                    raise ConfigError(f"{where} must not be empty")
                if isinstance(v, tuple) and all(isinstance(x, int) for x in v) and min(v) < 1:
                    raise ConfigError(f"{where} entries must be >= 1")
        for where in ("data.train_frac", "synth.noise_frac", "miner.prefix_aug"):
            sec, key = where.split(".")
            v = getattr(getattr(self, sec), key)
            if not 0 <= v < 1:
                raise ConfigError(f"{where} must be in [0, 1), got {v}")
        if self.data.train_frac == 0:
            raise ConfigError("data.train_frac must be > 0")
        if self.taxonomy.k < 2:
            raise ConfigError(f"taxonomy.k must be >= 2, got {self.taxonomy.k}")
        if self.data.source not in ("synthetic", "movielens"):
            raise ConfigError(f"data.source must be synthetic or movielens, got {self.data.source!r}")
        if self.miner.d_model % self.miner.heads:
            raise ConfigError("miner.d_model must be divisible by miner.heads")
        if check_paths and self.data.source == "movielens" and not Path(self.paths.data).is_file():
            raise ConfigError(f"paths.data: file not found: {self.paths.data!r}")


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(default, raw: str, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(p) for p in parts)
            return tuple(parts)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for sec in parser.sections():
            for key, value in parser.items(sec):
                cfg.set(f"{sec}.{key}", value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for sec, values in cfg.snapshot().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            lines.append(f"{k} = {', '.join(map(str, v)) if isinstance(v, list) else v}")
        lines.append("")
    return "\n".join(lines)
