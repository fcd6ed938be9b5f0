"""Run configuration: model geometry and training hyperparameters.

Configs load from JSON (or TOML on Python >= 3.11); CLI flags override
file values field by field.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

COMPONENTS = ("CE", "CR", "CSF", "CSY")


@dataclass
class ModelConfig:
    """Geometry of the embedding model.

    dim is the shared embedding width; the head/relation vectors are
    reshaped to (reshape_rows, reshape_cols) before the convolution, so
    reshape_rows * reshape_cols must equal dim.  word_dim is the word
    embedding width fed to the sequence encoder, whose per-direction
    hidden width is dim // 2.
    """

    dim: int = 300
    reshape_rows: int = 15
    reshape_cols: int = 20
    word_dim: int = 300
    conv_filters: int = 32
    conv_kernel: int = 3

    def __post_init__(self):
        if self.reshape_rows * self.reshape_cols != self.dim:
            raise ValueError(
                f"reshape {self.reshape_rows}x{self.reshape_cols} does not "
                f"factor dim={self.dim}"
            )
        if self.dim % 2 != 0:
            raise ValueError("dim must be even (two encoder directions)")
        if 2 * self.reshape_rows < self.conv_kernel or self.reshape_cols < self.conv_kernel:
            raise ValueError("stacked reshape too small for the conv kernel")

    @property
    def hidden(self) -> int:
        return self.dim // 2

    @property
    def conv_out_shape(self) -> tuple[int, int, int]:
        h = 2 * self.reshape_rows - self.conv_kernel + 1
        w = self.reshape_cols - self.conv_kernel + 1
        return (self.conv_filters, h, w)

    @property
    def flat_conv(self) -> int:
        f, h, w = self.conv_out_shape
        return f * h * w


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage."""

    stage: str = "pretrain"  # pretrain | finetune
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    tau: float = 0.05
    n_neg_ent: int = 50
    n_neg_rel: int = 10
    fusion_variant: str = "B"  # A | B
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.0
    disabled: tuple[str, ...] = ()
    eval_every: int = 5
    patience: int = 25
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.fusion_variant not in ("A", "B"):
            raise ValueError(f"fusion_variant must be A or B, got {self.fusion_variant!r}")
        bad = set(self.disabled) - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown components in disabled: {sorted(bad)}")
        self.disabled = tuple(self.disabled)

    def enabled(self, component: str) -> bool:
        return component not in self.disabled


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["disabled"] = list(self.train.disabled)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        model = ModelConfig(**d.get("model", {}))
        train_d = dict(d.get("train", {}))
        if "disabled" in train_d:
            train_d["disabled"] = tuple(train_d["disabled"])
        return cls(model=model, train=TrainConfig(**train_d))


def load_config(path: str | Path) -> RunConfig:
    """Read a RunConfig from a .json or .toml file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError as exc:  # py3.10: no tomllib
            raise ValueError(
                "TOML configs need Python >= 3.11; use JSON instead"
            ) from exc
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
