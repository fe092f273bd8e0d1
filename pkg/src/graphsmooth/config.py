"""Run configuration: one flat JSON document drives a whole experiment.

Defaults follow the reference hyperparameters: batch size 100, SGD momentum
0.9, weight decay 5e-4, learning rate 0.1 dropping to 0.001 at the halfway
epoch, regularizer gamma 0.01 with Laplacian power 2 and complete
batch graphs. Everything is overridable from the config file or CLI flags,
and cmd_train refuses to start on an invalid configuration.
"""

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .regularize import RegularizerConfig

__all__ = ["TrainConfig", "RegularizerConfig", "default_model_spec"]


def default_model_spec() -> list[dict]:
    """Desk-scale default: a small conv stack with one strided stage."""
    return [
        {"kind": "conv3x3", "units": 8},
        {"kind": "conv3x3_strided", "units": 16},
        {"kind": "conv3x3", "units": 16},
    ]


def default_dataset_spec() -> dict:
    return {
        "kind": "synthetic",
        "num_classes": 4,
        "train_size": 2000,
        "test_size": 1000,
        "image_size": 8,
        "noise_std": 0.18,
        "max_shift": 1,
    }


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    lr: float = 0.1
    lr_final: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    dtype: str = "float32"
    gamma: float = 0.01
    power_m: int = 2
    k: int | None = None
    beta: float = 0.01
    alpha: float = 0.5
    parseval: bool = False
    clamp_negative_similarities: bool = True
    monitored_points: list[int] | None = None
    model: list[dict] = field(default_factory=default_model_spec)
    dataset: dict = field(default_factory=default_dataset_spec)

    @property
    def regularizer(self) -> RegularizerConfig:
        return RegularizerConfig(gamma=self.gamma, power_m=self.power_m, k=self.k,
                                 beta=self.beta, alpha=self.alpha,
                                 parseval_enabled=self.parseval,
                                 clamp_negative_similarities=self.clamp_negative_similarities)

    def lr_at(self, epoch: int) -> float:
        """Step schedule: the rate drops to lr_final at the halfway epoch."""
        return self.lr if epoch < (self.epochs + 1) // 2 else self.lr_final

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.gamma > 0 and self.batch_size < 2:
            raise ConfigError("the regularizer needs batches of >= 2 examples")
        for name in ("lr", "lr_final", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if self.monitored_points is not None:
            pts = self.monitored_points
            if not pts or any(b <= a for a, b in zip(pts, pts[1:])):
                raise ConfigError("monitored_points must be nonempty and strictly increasing")
        if not self.model:
            raise ConfigError("model spec is empty")
        for spec in self.model:
            if spec.get("kind") not in ("dense", "conv3x3", "conv3x3_strided"):
                raise ConfigError(f"unknown layer kind {spec.get('kind')!r}")
            if int(spec.get("units", 0)) < 1:
                raise ConfigError("every layer needs a positive unit count")
        if self.dataset.get("kind") not in ("synthetic", "idx", "cifar10"):
            raise ConfigError(f"unknown dataset kind {self.dataset.get('kind')!r}")
        self.regularizer.validate()
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
