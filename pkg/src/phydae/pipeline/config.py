"""Model and training configuration records."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from ..losses import DEFAULT_BETA, LossWeights


def _positive(name: str, values) -> None:
    for v in values if isinstance(values, (tuple, list)) else (values,):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {values}")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    encoder_groups: tuple = (4, 6, 6, 8)
    decoder_blocks: tuple = (2, 4, 4)
    heads: tuple = (1, 2, 4, 8)
    adapter_rank: int = 8
    n_experts: int = 4
    k_train: int = 2
    k_infer: int = 1
    tau: float = 1.0
    tau_c: float = 0.1
    alpha: float = 1.0
    stage1_blocks: int = 2
    expert_hidden: int = 16
    ffn_expansion: int = 2
    prior_scale: float = 2.0
    channels: int = 3
    # stage 2 reads the stage-1 output and residual without backpropagating
    # into stage 1, which is then fitted by its own terms only
    detach_stage1: bool = True

    def __post_init__(self):
        for name in ("encoder_groups", "decoder_blocks", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        _positive("embed_dim", self.embed_dim)
        _positive("encoder_groups", self.encoder_groups)
        _positive("decoder_blocks", self.decoder_blocks)
        _positive("heads", self.heads)
        for name in ("adapter_rank", "k_train", "k_infer", "tau", "tau_c", "stage1_blocks",
                     "expert_hidden", "ffn_expansion", "channels"):
            _positive(name, getattr(self, name))
        if self.alpha < 0 or self.prior_scale < 0:
            raise ValueError("alpha and prior_scale must be nonnegative")
        if self.n_experts != 4:
            raise ValueError("n_experts must be 4 (one per degradation class)")
        if len(self.encoder_groups) != 4 or len(self.heads) != 4:
            raise ValueError("encoder_groups and heads need one entry per encoder level (4)")
        if len(self.decoder_blocks) != 3:
            raise ValueError("decoder_blocks needs one entry per decoder level (3)")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4")
        for lvl, h in enumerate(self.heads):
            if (self.embed_dim << lvl) % h:
                raise ValueError(f"heads[{lvl}]={h} does not divide level width {self.embed_dim << lvl}")
        if not (self.k_train <= self.n_experts and self.k_infer <= self.n_experts):
            raise ValueError("k must not exceed n_experts")

    @property
    def level_dims(self) -> tuple[int, ...]:
        return tuple(self.embed_dim << lvl for lvl in range(4))

    @property
    def decoder_dims(self) -> list[int]:
        """Decoder widths from full resolution to coarsest."""
        return [self.embed_dim << lvl for lvl in range(3)]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Reduced widths and depths that train in minutes on one CPU."""
        base = dict(embed_dim=16, encoder_groups=(1, 1, 1, 1), decoder_blocks=(1, 1, 1),
                    heads=(1, 2, 4, 8), adapter_rank=4, stage1_blocks=1, expert_hidden=8)
        base.update(overrides)
        return cls(**base)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    min_lr: float = 1e-6
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_epochs: int = 10
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    image_size: int = 64
    augment: bool = True
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.1
    lambda_freq: float = 0.01
    lambda_cls: float = 0.1
    lambda_stage1: float = 0.5
    gt_posterior: bool = True
    freeze_stage1: bool = False
    beta: dict = field(default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_BETA.items()})

    def __post_init__(self):
        if not self.lr > self.min_lr > 0:
            raise ValueError("need lr > min_lr > 0")
        for name in ("epochs", "batch_size", "image_size"):
            _positive(name, getattr(self, name))
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")
        for name in ("weight_decay", "lambda1", "lambda2", "lambda3", "lambda_freq",
                     "lambda_cls", "lambda_stage1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda_freq, dict(self.beta))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"] = {k: list(v) for k, v in self.beta.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "beta" in d:
            d["beta"] = {k: tuple(v) for k, v in d["beta"].items()}
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(lr=2e-3, min_lr=1e-5, warmup_epochs=1, epochs=20, batch_size=4)
        base.update(overrides)
        return cls(**base)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)
