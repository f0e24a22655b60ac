"""The training loop: identity-balanced pair batches, joint loss, SGD.

One epoch is a fixed number of sampled batches.  The learning rate is
the configured base value up to the drop epoch and a tenth of it after.
Training aborts (never continues) when the loss goes non-finite, naming
the epoch and batch.  Everything downstream of the two seed streams
(sampler, augmentation) is deterministic, so identical configs produce
bit-identical checkpoints.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tape, backward, concat_rows
from .backbone import IR, RGB, embed_batch
from .config import RunConfig
from .contrast import score_pairs_batch
from .datagen import (STREAM_AUGMENT, STREAM_SAMPLER, IdentitySample,
                      SplitMix64, augment, derive_seed, generate_dataset,
                      make_batch)
from .losses import id_loss, pbce_loss, total_loss
from .model import ReidModel, build_model, save_model, stack_images
from .nn import Sgd, global_avg_pool_batch


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss and stopped."""


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    pbce: float
    id: float
    total: float
    seconds: float


@dataclass
class TrainLog:
    records: list

    def final_total(self) -> float:
        return self.records[-1].total


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def train(cfg: RunConfig, dataset: Optional[Sequence[IdentitySample]] = None,
          progress: Optional[Callable[[EpochRecord], None]] = None
          ) -> tuple[ReidModel, Sgd, TrainLog]:
    """Train a fresh model on `dataset` (generated from config when absent)."""
    if dataset is None:
        dataset = generate_dataset(cfg.data_seed, cfg.train_ids, cfg.per_modality)
    ids = sorted({s.identity for s in dataset})
    class_of = {ident: k for k, ident in enumerate(ids)}
    num_classes = len(ids)
    model = build_model(cfg.backbone_config(), cfg.sampling_config(),
                        num_classes, seed=cfg.train_seed)
    optimizer = Sgd(cfg.lr, cfg.momentum)
    sampler_rng = SplitMix64(derive_seed(cfg.train_seed, STREAM_SAMPLER))
    augment_rng = SplitMix64(derive_seed(cfg.train_seed, STREAM_AUGMENT))
    _, in_h, in_w = cfg.backbone_config().input_shape
    log = TrainLog([])
    for epoch in range(1, cfg.epochs + 1):
        optimizer.learning_rate = cfg.lr_at(epoch)
        started = time.perf_counter()
        sums = np.zeros(3)
        for it in range(cfg.iters_per_epoch):
            batch = make_batch(dataset, cfg.batch_identities, cfg.neg_ratio,
                               sampler_rng)
            # One mirror decision per slot, shared across modalities:
            # slot k of the two lists is the positive pair (same person),
            # and flipping only one side would turn its appearance into a
            # different-person pair while the label still says same.
            flips = [augment_rng.next_float() < cfg.flip_prob
                     for _ in batch.rgb_images]
            rgb = [augment(s, cfg.pad, in_h, in_w, cfg.flip_prob, augment_rng,
                           flip=f) for s, f in zip(batch.rgb_images, flips)]
            ir = [augment(s, cfg.pad, in_h, in_w, cfg.flip_prob, augment_rng,
                          flip=f) for s, f in zip(batch.ir_images, flips)]
            rgb_idx = np.array([p[0] for p in batch.pair_index])
            ir_idx = np.array([p[1] for p in batch.pair_index])
            pair_labels = np.array([p[2] for p in batch.pair_index])
            id_labels = np.array([class_of[s.identity] for s in rgb]
                                 + [class_of[s.identity] for s in ir])
            modalities = [RGB] * len(rgb) + [IR] * len(ir)
            with Tape() as tape:
                maps_r = embed_batch(model.backbone, stack_images(rgb), RGB)
                maps_i = embed_batch(model.backbone, stack_images(ir), IR)
                scores = score_pairs_batch(maps_r, maps_i, rgb_idx, ir_idx,
                                           model.sampling, model.diff_head)
                pbce = pbce_loss(scores, pair_labels, cfg.loss_clamp)
                feats = concat_rows([global_avg_pool_batch(maps_r),
                                     global_avg_pool_batch(maps_i)])
                ident = id_loss(feats, id_labels, model.classifier,
                                num_classes, modalities)
                report = total_loss(pbce, ident, cfg.loss_lambda)
            values = (report.pbce.item(), report.id.item(), report.total.item())
            if not all(np.isfinite(v) for v in values):
                raise NumericAbort(
                    f"non-finite loss at epoch {epoch}, batch {it}: "
                    f"pbce={values[0]}, id={values[1]}, total={values[2]}")
            model.store.zero_grads()
            backward(report.total, tape)
            optimizer.step(model.store)
            sums += values
        record = EpochRecord(
            epoch=epoch, lr=optimizer.learning_rate,
            pbce=sums[0] / cfg.iters_per_epoch,
            id=sums[1] / cfg.iters_per_epoch,
            total=sums[2] / cfg.iters_per_epoch,
            seconds=time.perf_counter() - started,
        )
        log.records.append(record)
        if progress is not None:
            progress(record)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 \
                and epoch < cfg.epochs:
            _ensure_parent(cfg.checkpoint_path)
            save_model(cfg.checkpoint_path, model, optimizer)
    _ensure_parent(cfg.checkpoint_path)
    save_model(cfg.checkpoint_path, model, optimizer)
    return model, optimizer, log
