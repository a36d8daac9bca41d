"""Run configuration (JSON, versioned) and ablation variant switches."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .losses import LossConfig
from .model import ModelConfig
from .prompts import DEFAULT_POLICY, DeltaPolicy
from .synthdata import DatasetSpec

CONFIG_VERSION = 1

VARIANTS = (
    "full", "baseline", "no_qtp", "no_fp", "fixed_delta:<k>", "ctp", "cqtp",
    "no_trans", "no_cnn", "no_t2c", "c2t", "bid", "no_ce", "no_ca", "avg_w",
    "no_rank", "srank", "crank", "vtc", "align_no_ft", "align_no_st",
)

# human-readable row labels for comparison tables
VARIANT_LABELS = {
    "full": "full model",
    "baseline": "baseline (category prompt, CNN decoder, counting loss)",
    "no_qtp": "w/o quantity prompts",
    "no_fp": "w/o factual prompts",
    "ctp": "category-oriented prompts",
    "cqtp": "category + quantity prompts",
    "no_trans": "decoder w/o transformer stream",
    "no_cnn": "decoder w/o CNN stream",
    "no_t2c": "decoder w/o T2C adapters",
    "c2t": "decoder with C2T adapters",
    "bid": "decoder with bidirectional adapters",
    "no_ce": "adapters w/o channel excitation",
    "no_ca": "adapters w/o cross attention",
    "avg_w": "decoder with averaged weights",
    "no_rank": "w/o ranking loss",
    "srank": "ranking within streams only",
    "crank": "ranking across streams only",
    "vtc": "contrastive loss instead of alignment",
    "align_no_ft": "alignment w/o first term",
    "align_no_st": "alignment w/o second term",
}


class ConfigError(ValueError):
    """Invalid configuration; CLI exit code 2."""


@dataclass(frozen=True)
class Variant:
    name: str = "full"
    prompts: str = "qtp"  # qtp | category | ctp | cqtp
    factual: bool = True
    policy: DeltaPolicy = DEFAULT_POLICY
    align: Optional[str] = "full"  # full | no_ft | no_st | vtc | None
    rank: Optional[str] = "full"  # full | srank | crank | None
    decoder: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        if self.name.startswith("fixed_delta:"):
            return f"fixed interval ({self.name.split(':', 1)[1]})"
        return VARIANT_LABELS.get(self.name, self.name)

    @property
    def quantity_prompts(self) -> bool:
        return self.prompts in ("qtp", "cqtp")


def parse_variant(name: str) -> Variant:
    v = Variant(name=name)
    if name == "full":
        return v
    if name == "baseline":
        return replace(v, prompts="category", align=None, rank=None, decoder={"use_trans": False})
    if name == "no_qtp":
        return replace(v, prompts="category", align=None)
    if name == "no_fp":
        return replace(v, factual=False)
    if name.startswith("fixed_delta:"):
        try:
            k = int(name.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad fixed_delta variant {name!r}") from None
        if k < 1:
            raise ConfigError("fixed_delta needs a positive interval")
        return replace(v, policy=DeltaPolicy.fixed(k))
    if name == "ctp":
        return replace(v, prompts="ctp")
    if name == "cqtp":
        return replace(v, prompts="cqtp")
    decoder_flags = {
        "no_trans": {"use_trans": False},
        "no_cnn": {"use_cnn": False},
        "no_t2c": {"t2c": False},
        "c2t": {"t2c": False, "c2t": True},
        "bid": {"t2c": True, "c2t": True},
        "no_ce": {"use_ce": False},
        "no_ca": {"use_ca": False},
        "avg_w": {"gate": "avg"},
    }
    if name in decoder_flags:
        return replace(v, decoder=decoder_flags[name])
    losses = {
        "no_rank": {"rank": None},
        "srank": {"rank": "srank"},
        "crank": {"rank": "crank"},
        "vtc": {"align": "vtc"},
        "align_no_ft": {"align": "no_ft"},
        "align_no_st": {"align": "no_st"},
    }
    if name in losses:
        return replace(v, **losses[name])
    raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    decay_factor: float = 1 / 3
    decay_at: tuple = (0.6, 0.85)  # fractions of total epochs
    grad_clip: Optional[float] = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    data_root: Optional[str] = None  # prebuilt dataset directory; generated in memory otherwise
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 30
    batch_size: int = 16
    seeds: tuple = (0,)
    variant: str = "full"
    n_counterfactual: int = 8
    eval_levels: tuple = (0, 1, 2, 3)
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.n_counterfactual < 4 or self.n_counterfactual % 2:
            raise ConfigError("n_counterfactual must be even and >= 4")
        if self.model.image_size != self.data.image_size:
            raise ConfigError("model and data image sizes differ")
        if self.optim.lr <= 0:
            raise ConfigError("lr must be positive")
        parse_variant(self.variant)

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        d["data"] = self.data.to_json()
        d["optim"]["decay_at"] = list(self.optim.decay_at)
        d["seeds"] = list(self.seeds)
        d["eval_levels"] = list(self.eval_levels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version!r} unsupported (expected {CONFIG_VERSION})")
        try:
            model = ModelConfig(**d.pop("model", {}))
            loss = LossConfig(**d.pop("loss", {}))
            data = DatasetSpec(**d.pop("data", {}))
            optim = d.pop("optim", {})
            optim = OptimConfig(**{**optim, "decay_at": tuple(optim.get("decay_at", (0.6, 0.85)))})
            seeds = tuple(d.pop("seeds", (0,)))
            levels = tuple(d.pop("eval_levels", (0, 1, 2, 3)))
            model.decoder_channels = tuple(model.decoder_channels)
            return cls(model=model, loss=loss, data=data, optim=optim, seeds=seeds, eval_levels=levels, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_json(doc)


def save_config(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
