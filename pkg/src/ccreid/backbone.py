"""Dual-path convolutional backbone embedding RGB and IR images into one
spatially structured common space.

Each stage is two 3x3 conv + relu blocks scaled by a fixed gain; designated
stages downsample by stride 2 on their first conv.  Stages below the sharing
boundary get per-modality parameters; stages at or above it are registered
once and aliased from both paths, so both modalities read and train one
tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .autodiff import ShapeError, Tensor, relu, reshape, scale, zeros
from .nn import Conv2d, ParamStore, conv_output_size, conv2d_batch, global_avg_pool

RGB = "rgb"
IR = "ir"
MODALITIES = (RGB, IR)

KERNEL = 3
PAD = 1
# Fixed per-block gain: relu on a zero-mean pre-activation halves its
# second moment, which across eight blocks would shrink activations by
# ~16x and stall training from a cold start.  sqrt(2) restores the scale.
BLOCK_GAIN = 2.0 ** 0.5


@dataclass
class BackboneConfig:
    stage_channels: tuple = (8, 16, 32, 64)
    downsample_stages: tuple = (1, 2, 3)
    shared_from_stage: int = 2
    input_shape: tuple = (3, 64, 32)

    def validate(self) -> None:
        n = len(self.stage_channels)
        if n < 1:
            raise ValueError("backbone needs at least one stage")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage channels must be positive, got {self.stage_channels}")
        if not 0 <= self.shared_from_stage <= n:
            raise ValueError(
                f"shared_from_stage must be in [0, {n}], got {self.shared_from_stage}")
        for s in self.downsample_stages:
            if not 0 <= s < n:
                raise ValueError(f"downsample stage {s} out of range for {n} stages")
        if len(set(self.downsample_stages)) != len(self.downsample_stages):
            raise ValueError(f"duplicate downsample stages: {self.downsample_stages}")
        if len(self.input_shape) != 3:
            raise ValueError(f"input shape must be (channels, H, W), got {self.input_shape}")
        c, h, w = self.output_shape()
        if h < 1 or w < 1:
            raise ValueError(
                f"config collapses the feature map to {c}x{h}x{w}; "
                "reduce downsampling or enlarge the input")

    def output_shape(self) -> tuple[int, int, int]:
        _, h, w = self.input_shape
        for k in range(len(self.stage_channels)):
            stride = 2 if k in self.downsample_stages else 1
            h = conv_output_size(h, KERNEL, stride, PAD)
            w = conv_output_size(w, KERNEL, stride, PAD)
        return self.stage_channels[-1], h, w


@dataclass
class CommonFeature:
    map: Tensor
    modality: str


@dataclass
class Backbone:
    config: BackboneConfig
    store: ParamStore
    paths: dict = field(default_factory=dict)


def build(config: BackboneConfig, store: ParamStore) -> Backbone:
    """Register both stage stacks in the store and return the model."""
    config.validate()
    model = Backbone(config, store)
    n_stages = len(config.stage_channels)
    for modality in MODALITIES:
        stages = []
        in_ch = config.input_shape[0]
        for k in range(n_stages):
            out_ch = config.stage_channels[k]
            first_stride = 2 if k in config.downsample_stages else 1
            shared = k >= config.shared_from_stage
            convs = []
            for b, (ci, stride) in enumerate([(in_ch, first_stride), (out_ch, 1)]):
                prefix = "shared" if shared else modality
                base = f"{prefix}.stage{k}.conv{b}"
                if shared and f"{base}.weight" in store.entries:
                    weight = store.get(f"{base}.weight")
                    bias = store.get(f"{base}.bias")
                else:
                    weight = store.add(f"{base}.weight",
                                       zeros((out_ch, ci, KERNEL, KERNEL)))
                    bias = store.add(f"{base}.bias", zeros((out_ch,)))
                if shared:
                    alias = f"{modality}.stage{k}.conv{b}"
                    if f"{alias}.weight" not in store.sharing:
                        store.alias(f"{alias}.weight", f"{base}.weight")
                        store.alias(f"{alias}.bias", f"{base}.bias")
                convs.append(Conv2d(weight, bias, stride=stride, padding=PAD))
            stages.append(convs)
            in_ch = out_ch
        model.paths[modality] = stages
    return model


def embed_batch(model: Backbone, images: Tensor, modality: str) -> Tensor:
    """Run a (B, C, H, W) batch through one path -> (B, c_F, h_F, w_F)."""
    if modality not in model.paths:
        raise ValueError(f"unknown modality '{modality}'")
    if len(images.shape) != 4 or images.shape[1:] != tuple(model.config.input_shape):
        raise ShapeError(
            f"embed_batch: expected (B, {', '.join(map(str, model.config.input_shape))}), "
            f"got {images.shape}")
    x = images
    for stage in model.paths[modality]:
        for conv in stage:
            x = scale(relu(conv2d_batch(x, conv.weight, conv.bias,
                                        conv.stride, conv.padding)), BLOCK_GAIN)
    return x


def embed(model: Backbone, image: Tensor, modality: str) -> CommonFeature:
    """Embed one (C, H, W) image into the common space."""
    if len(image.shape) != 3:
        raise ShapeError(f"embed: expected rank-3 image, got {image.shape}")
    batched = reshape(image, (1,) + image.shape)
    out = embed_batch(model, batched, modality)
    return CommonFeature(reshape(out, out.shape[1:]), modality)


def global_feature(f: CommonFeature) -> Tensor:
    """Spatially pooled descriptor used by the ID loss and cosine retrieval."""
    return global_avg_pool(f.map)
