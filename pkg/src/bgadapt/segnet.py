"""Toy encoder/decoder segmentation network with one classifier head per step."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """The model configuration cannot process the given input."""


@dataclass(frozen=True)
class ModelConfig:
    enc_widths: tuple[int, int] = (16, 16)
    feat_width: int = 16
    head_width: int = 32
    in_channels: int = 3

    @property
    def downsample(self) -> int:
        return 2


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, out_ch, in_ch, k, name, zero=False):
        w = np.zeros((out_ch, in_ch, k, k), np.float32) if zero else _he(rng, (out_ch, in_ch, k, k))
        return cls(
            Tensor(w, requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(out_ch, np.float32), requires_grad=True, name=f"{name}.bias"),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class StepHead:
    step_index: int
    num_classes: int
    hidden: Conv
    out: Conv

    @property
    def is_initial(self) -> bool:
        return self.step_index == 1

    def __call__(self, feats: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        hidden = T.relu(self.hidden(feats))
        out = self.out(hidden)
        n = self.num_classes
        return T.slice_channels(out, 0, n), T.slice_channels(out, n, n + 1), hidden

    def parameters(self) -> list[Tensor]:
        return self.hidden.parameters() + self.out.parameters()


@dataclass
class LogitBundle:
    """Per-head outputs of one forward pass.

    ``adapt[0]`` is the true background channel of the initial head; for
    later heads it is the residual adaptation channel. ``mu_b`` stays empty
    until a background aggregation fills it.
    """

    class_logits: list[Tensor]
    adapt: list[Tensor]
    features: list[Tensor]
    decoder: Tensor | None = None
    mu_b: Tensor | None = None

    @property
    def num_steps(self) -> int:
        return len(self.class_logits)


@dataclass
class SegmentationModel:
    """Shared encoder/decoder plus an ordered list of step heads.

    ``background_mode`` is ``"adapt"`` for residual background modelling or
    ``"shared"`` for a single background classifier (the ablation baseline);
    ``use_filter`` controls whether old residuals are clipped to non-positive
    values when aggregated.
    """

    config: ModelConfig
    enc: list[Conv]
    dec: Conv
    heads: list[StepHead] = field(default_factory=list)
    background_mode: str = "adapt"
    use_filter: bool = True

    @classmethod
    def create(cls, num_initial_classes: int, seed: int, config: ModelConfig | None = None, **flags) -> "SegmentationModel":
        config = config or ModelConfig()
        rng = np.random.default_rng([seed, 0])
        c1, c2 = config.enc_widths
        enc = [
            Conv.init(rng, c1, config.in_channels, 3, "enc.0"),
            Conv.init(rng, c2, c1, 3, "enc.1"),
            Conv.init(rng, c2, c2, 3, "enc.2"),
        ]
        dec = Conv.init(rng, config.feat_width, c2, 3, "dec.0")
        model = cls(config, enc, dec, **flags)
        model._append_head(num_initial_classes, rng)
        return model

    @property
    def num_steps(self) -> int:
        return len(self.heads)

    @property
    def class_counts(self) -> list[int]:
        return [h.num_classes for h in self.heads]

    @property
    def num_classes(self) -> int:
        return sum(self.class_counts)

    def _append_head(self, num_classes: int, rng: np.random.Generator) -> None:
        i = len(self.heads) + 1
        cfg = self.config
        self.heads.append(
            StepHead(
                step_index=i,
                num_classes=num_classes,
                hidden=Conv.init(rng, cfg.head_width, cfg.feat_width, 1, f"head.{i}.hidden"),
                # zero output layer: a fresh residual channel starts as an exact no-op
                out=Conv.init(rng, num_classes + 1, cfg.head_width, 1, f"head.{i}.out", zero=True),
            )
        )

    def add_step_head(self, num_new_classes: int, seed: int = 0) -> StepHead:
        if num_new_classes < 1:
            raise ValueError(f"a step head needs at least one class, got {num_new_classes}")
        self._append_head(num_new_classes, np.random.default_rng([seed, len(self.heads) + 1]))
        return self.heads[-1]

    def backbone_parameters(self) -> list[Tensor]:
        params = []
        for conv in self.enc:
            params += conv.parameters()
        return params + self.dec.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = self.backbone_parameters()
        for head in self.heads:
            params += head.parameters()
        return [(p.name, p) for p in params]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def forward_features(self, image: Tensor) -> Tensor:
        h, w = image.shape[-2:]
        if image.shape[-3] != self.config.in_channels:
            raise ConfigError(f"expected {self.config.in_channels} input channels, got image {image.shape}")
        f = self.config.downsample
        if h % f or w % f:
            raise ConfigError(f"image size {h}x{w} is not divisible by the downsample factor {f}")
        # centre pixel values so the grey canvas sits near zero
        x = T.relu(self.enc[0](image - 0.5))
        x = T.maxpool2(x)
        x = T.relu(self.enc[1](x))
        x = T.relu(self.enc[2](x))
        x = T.nearest_upsample2(x)
        return T.relu(self.dec(x))

    def forward_heads(self, feats: Tensor) -> LogitBundle:
        if feats.shape[-3] != self.config.feat_width:
            raise T.ShapeError(f"heads expect {self.config.feat_width} feature channels, got {feats.shape}")
        bundle = LogitBundle([], [], [], decoder=feats)
        for head in self.heads:
            logits, adapt, hidden = head(feats)
            bundle.class_logits.append(logits)
            bundle.adapt.append(adapt)
            bundle.features.append(hidden)
        return bundle

    def forward(self, image: Tensor) -> LogitBundle:
        return self.forward_heads(self.forward_features(image))

    def snapshot(self) -> "SegmentationModel":
        """Deep copy with gradient tracking switched off."""
        teacher = copy.deepcopy(self)
        for p in teacher.parameters():
            p.requires_grad = False
            p.grad = None
        return teacher

    def set_trainable(self, trainable: bool = True) -> None:
        for p in self.parameters():
            p.requires_grad = trainable

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter, keyed by name."""
        return {name: p.data.copy() for name, p in self.named_parameters()}
