"""The trainable whole: dual-path backbone, difference head, ID classifier.

The difference head's input width is fixed by the sampling grid at build
time, so a model is bound to one SamplingConfig.  All parameters live in
one ParamStore and checkpoint together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .autodiff import Tensor, default_dtype, tensor, zeros
from .backbone import IR, RGB, Backbone, BackboneConfig, build, embed_batch
from .contrast import DifferenceHead, SamplingConfig, head_input_size
from .datagen import IdentitySample
from .losses import IdClassifier


@dataclass
class ReidModel:
    backbone_cfg: BackboneConfig
    sampling: SamplingConfig
    store: nn.ParamStore
    backbone: Backbone
    diff_head: DifferenceHead
    classifier: IdClassifier
    num_classes: int

    def map_shape(self) -> tuple[int, int, int]:
        return self.backbone_cfg.output_shape()


def build_model(backbone_cfg: BackboneConfig, sampling: SamplingConfig,
                num_classes: int, seed: Optional[int] = None) -> ReidModel:
    """Register every parameter and optionally initialize from a seed."""
    if num_classes < 1:
        raise ValueError(f"need at least one identity class, got {num_classes}")
    store = nn.ParamStore()
    bb = build(backbone_cfg, store)
    c_f, h_f, w_f = backbone_cfg.output_shape()
    sampling.validate(h_f, w_f)
    n_in = head_input_size((c_f, h_f, w_f), sampling)
    head = DifferenceHead(
        weight=store.add("head.diff.weight", zeros((1, n_in))),
        bias=store.add("head.diff.bias", zeros((1,))),
    )
    classifier = IdClassifier(
        weight=store.add("head.id.weight", zeros((num_classes, c_f))),
        bias=store.add("head.id.bias", zeros((num_classes,))),
    )
    if seed is not None:
        nn.init_params(store, seed)
        mirror_paths(store)
    return ReidModel(backbone_cfg, sampling, store, bb, head, classifier, num_classes)


def mirror_paths(store: nn.ParamStore) -> None:
    """Copy each RGB stem weight onto its IR twin.

    A randomly drawn pair of stems maps the two modalities through
    unrelated projections, so same-identity images land nowhere near
    each other in the common space and pair training never finds a
    signal to amplify.  Starting both stems from one draw aligns the
    common space from the first step; the paths are still separate
    tensors and specialize as soon as gradients differ.
    """
    for name in store.names():
        if name.startswith(f"{RGB}."):
            twin = f"{IR}." + name[len(RGB) + 1:]
            if twin in store:
                store.get(twin).data = store.get(name).data.copy()


def stack_images(samples: Sequence[IdentitySample]) -> Tensor:
    """Stack sample images into one (B, C, H, W) input tensor."""
    if not samples:
        raise ValueError("stack_images: empty sample list")
    batch = np.stack([s.image.data for s in samples])
    return tensor(batch, dtype=default_dtype())


def embed_samples(model: ReidModel, samples: Sequence[IdentitySample]) -> Tensor:
    """Embed same-modality samples into common-space maps."""
    modalities = {s.modality for s in samples}
    if len(modalities) != 1:
        raise ValueError(f"embed_samples: mixed modalities {sorted(modalities)}")
    return embed_batch(model.backbone, stack_images(samples), modalities.pop())


def save_model(path, model: ReidModel, optimizer: Optional[nn.Sgd] = None) -> None:
    nn.save_checkpoint(path, model.store, optimizer)


def load_model(path, model: ReidModel, optimizer: Optional[nn.Sgd] = None) -> None:
    """Restore a previously built model's parameters in place."""
    entries, sharing = nn.load_checkpoint(path)
    nn.restore_params(model.store, entries, sharing, optimizer)
