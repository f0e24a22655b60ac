"""Deterministic synthetic two-modality person dataset.

Each identity is a seed-derived "genome" (body proportions, clothing
texture frequencies, hues).  Renders are simple figures: head, striped
torso, checkered legs.  The RGB render colors parts by hue; the IR
render replaces color with a non-monotone hue-to-intensity response
replicated across channels, weaker texture contrast, and its own noise,
so the two modalities share geometry and texture statistics but not a
linear pixel relationship.

All randomness flows through SplitMix64 streams keyed by concern
(identity, nuisance, sampler), so changing batch order never perturbs
rendering.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import fileio
from .autodiff import Tensor, tensor
from .backbone import IR, MODALITIES, RGB

DATASET_MAGIC = b"CMDS"
DATASET_VERSION = 1
MODALITY_CODES = {RGB: 0, IR: 1}
CODE_MODALITIES = {v: k for k, v in MODALITY_CODES.items()}

IMAGE_SHAPE = (3, 64, 32)

# stream tags so one global seed fans out into independent generators
STREAM_IDENTITY = 0x1D
STREAM_NUISANCE = 0x2E
STREAM_SAMPLER = 0x3F
STREAM_AUGMENT = 0x4A


class DataError(Exception):
    """Dataset contents cannot satisfy the request."""


_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """The standard 64-bit splittable PRNG; tiny state, good enough here."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return _mix(self.state)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def randrange(self, n: int) -> int:
        if n < 1:
            raise ValueError(f"randrange: need n >= 1, got {n}")
        return self.next_u64() % n

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def sample(self, seq, k: int) -> list:
        """k distinct elements via partial Fisher-Yates."""
        pool = list(seq)
        if k > len(pool):
            raise ValueError(f"sample: k={k} exceeds population {len(pool)}")
        for i in range(k):
            j = i + self.randrange(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def derive_seed(*parts: int) -> int:
    """Fold integer parts into one 64-bit stream seed."""
    s = 0
    for p in parts:
        s = _mix((s ^ (int(p) & _MASK)) * 0x9FB21C651E98DF25 & _MASK)
    return s


def uniform_block(seed: int, shape) -> np.ndarray:
    """A deterministic block of U[0,1) draws, same family as SplitMix64.

    SplitMix64's state after k steps is seed + k*GOLDEN, so the whole
    sequence vectorizes.
    """
    n = int(np.prod(shape, dtype=np.int64))
    idx = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK) + idx * np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return ((z >> np.uint64(11)) * 2.0 ** -53).reshape(shape)


def normal_block(seed: int, shape) -> np.ndarray:
    """Standard normals over U[0,1) pairs (Box-Muller)."""
    n = int(np.prod(shape, dtype=np.int64))
    u = uniform_block(seed, (2, n))
    r = np.sqrt(-2.0 * np.log(np.maximum(u[0], 1e-300)))
    return (r * np.cos(2.0 * np.pi * u[1])).reshape(shape)


# --------------------------------------------------------------------------
# Identities and rendering
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityGenome:
    """Per-identity appearance parameters; all renders of one identity
    share these.  Field ranges are fixed by `generate_identity`."""
    head_h: float      # head height fraction, [0.10, 0.20]
    torso_h: float     # torso height fraction, [0.30, 0.48]
    head_w: float      # head width fraction, [0.28, 0.55]
    torso_w: float     # torso width fraction, [0.52, 0.95]
    leg_w: float       # single-leg width fraction, [0.14, 0.30]
    stripe_freq: float  # torso stripe cycles, [1.0, 6.0]
    checker_freq: float  # leg checker cycles, [1.0, 4.0]
    base_hue: float    # torso hue, [0, 1)
    leg_hue: float     # leg hue, [0, 1)
    phase: float       # texture phase, [0, 2*pi)


def generate_identity(global_seed: int, ident: int) -> IdentityGenome:
    if ident < 0:
        raise ValueError(f"identity must be >= 0, got {ident}")
    rng = SplitMix64((global_seed ^ ident) & _MASK)
    base_hue = rng.next_float()
    return IdentityGenome(
        head_h=rng.uniform(0.10, 0.20),
        torso_h=rng.uniform(0.30, 0.48),
        head_w=rng.uniform(0.28, 0.55),
        torso_w=rng.uniform(0.52, 0.95),
        leg_w=rng.uniform(0.14, 0.30),
        stripe_freq=rng.uniform(1.0, 6.0),
        checker_freq=rng.uniform(1.0, 4.0),
        base_hue=base_hue,
        leg_hue=(base_hue + rng.uniform(0.20, 0.60)) % 1.0,
        phase=rng.uniform(0.0, 2.0 * math.pi),
    )


@dataclass
class IdentitySample:
    image: Tensor
    identity: int
    modality: str


_HEAD_HUE = 0.09
_SATURATION = 0.78
# how visible clothing texture is in each modality; texture survives the
# modality change far better than color does, which keeps matching
# possible at all once hues are scrambled
_TEXTURE_IR_DAMP = 0.35
_RGB_NOISE = 0.01
_IR_NOISE = 0.03


def _ir_response(hue: float) -> float:
    """Non-monotone hue -> infrared intensity; distant hues can collide."""
    return 0.45 + 0.40 * math.sin(2.0 * math.pi * (3.0 * hue + 0.11))


def render(genome: IdentityGenome, modality: str, nuisance_seed: int) -> IdentitySample:
    """Draw one 3x64x32 figure; every pixel is determined by the inputs."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality '{modality}'")
    _, height, width = IMAGE_SHAPE
    rng = SplitMix64(derive_seed(nuisance_seed, STREAM_NUISANCE))
    dy = rng.randrange(7) - 3
    dx = rng.randrange(7) - 3
    brightness = 1.0 + rng.uniform(-0.10, 0.10)
    noise_seed = rng.next_u64()

    # Both backgrounds sit inside their figure intensity ranges, so
    # figure/background contrast polarity varies per identity and part
    # instead of giving the two modalities one shared silhouette sign.
    bg = 0.30 if modality == RGB else 0.22
    img = np.full(IMAGE_SHAPE, bg, dtype=np.float64)

    top = 0.03
    bands = [
        ("head", top, top + genome.head_h, genome.head_w, _HEAD_HUE, 0.95),
        ("torso", top + genome.head_h, top + genome.head_h + genome.torso_h,
         genome.torso_w, genome.base_hue, 0.80),
        ("legs", top + genome.head_h + genome.torso_h, 0.97,
         2 * genome.leg_w + 0.10, genome.leg_hue, 0.68),
    ]
    for part, y0f, y1f, wf, hue, emissivity in bands:
        y0 = max(0, min(height, int(round(y0f * height)) + dy))
        y1 = max(0, min(height, int(round(y1f * height)) + dy))
        half = wf * width / 2.0
        x0 = max(0, min(width, int(round(width / 2.0 - half)) + dx))
        x1 = max(0, min(width, int(round(width / 2.0 + half)) + dx))
        if y1 <= y0 or x1 <= x0:
            continue
        ys = np.arange(y0, y1)
        xs = np.arange(x0, x1)
        rel_y = (ys - y0) / max(y1 - y0, 1)
        rel_x = (xs - x0) / max(x1 - x0, 1)
        if part == "torso":
            mod = 0.45 + 0.55 * np.sin(
                2.0 * np.pi * genome.stripe_freq * rel_y + genome.phase)
            mod = np.repeat(mod[:, None], len(xs), axis=1)
        elif part == "legs":
            wave = (np.sin(2.0 * np.pi * genome.checker_freq * rel_y
                           + genome.phase)[:, None]
                    * np.sin(2.0 * np.pi * (genome.checker_freq + 1.0) * rel_x)[None, :])
            mod = np.where(wave >= 0.0, 1.0, 0.35)
        else:
            mod = np.ones((len(ys), len(xs)))
        if modality == RGB:
            color = colorsys.hsv_to_rgb(hue, _SATURATION, 1.0)
            for c in range(3):
                img[c, y0:y1, x0:x1] = mod * color[c] * 0.92
        else:
            flat = 1.0 - _TEXTURE_IR_DAMP * (1.0 - mod)
            img[:, y0:y1, x0:x1] = flat * emissivity * _ir_response(hue)

    sigma = _RGB_NOISE if modality == RGB else _IR_NOISE
    img = img * brightness + sigma * normal_block(noise_seed, IMAGE_SHAPE)
    img = np.clip(img, 0.0, 1.0)
    return IdentitySample(tensor(img.astype(np.float32), dtype=np.float32),
                          identity=-1, modality=modality)


def generate_dataset(global_seed: int, num_ids: int, per_modality: int,
                     first_id: int = 0) -> list[IdentitySample]:
    """Render `per_modality` images per modality for each identity."""
    samples = []
    for ident in range(first_id, first_id + num_ids):
        genome = generate_identity(global_seed, ident)
        for modality in MODALITIES:
            for k in range(per_modality):
                nuisance = derive_seed(global_seed, STREAM_NUISANCE, ident,
                                       MODALITY_CODES[modality], k)
                sample = render(genome, modality, nuisance)
                sample.identity = ident
                samples.append(sample)
    return samples


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------

def augment(x: IdentitySample, pad: int, out_h: int, out_w: int,
            flip_prob: float, rng: SplitMix64,
            flip: Optional[bool] = None) -> IdentitySample:
    """Zero-pad, random-crop back, and maybe mirror one sample.

    Passing `flip` overrides the coin toss; the training loop uses this
    to mirror both images of a positive pair together, since a
    chirality-mismatched pair carries a same-person label but looks like
    a different person to the pair scorer.
    """
    if pad < 0:
        raise ValueError(f"augment: negative pad {pad}")
    data = x.image.data
    _, h, w = data.shape
    padded_h, padded_w = h + 2 * pad, w + 2 * pad
    if out_h > padded_h or out_w > padded_w:
        raise ValueError(
            f"augment: crop {out_h}x{out_w} larger than padded image "
            f"{padded_h}x{padded_w}")
    if pad:
        data = np.pad(data, ((0, 0), (pad, pad), (pad, pad)))
    top = rng.randrange(padded_h - out_h + 1)
    left = rng.randrange(padded_w - out_w + 1)
    data = data[:, top:top + out_h, left:left + out_w]
    if flip is None:
        flip = rng.next_float() < flip_prob
    if flip:
        data = data[:, :, ::-1]
    return IdentitySample(tensor(np.ascontiguousarray(data), dtype=x.image.dtype),
                          identity=x.identity, modality=x.modality)


# --------------------------------------------------------------------------
# Batch sampling
# --------------------------------------------------------------------------

@dataclass
class PairBatch:
    rgb_images: list      # N samples, one per chosen identity
    ir_images: list       # N samples, aligned with rgb_images
    pair_index: list      # (rgb_slot, ir_slot, label 0=same/1=different)
    num_pos: int
    num_neg: int


def _index_by_identity(dataset: Sequence[IdentitySample]) -> dict:
    index: dict[int, dict[str, list]] = {}
    for s in dataset:
        index.setdefault(s.identity, {RGB: [], IR: []})[s.modality].append(s)
    return index


def make_batch(dataset: Sequence[IdentitySample], n: int, r: int,
               rng: SplitMix64) -> PairBatch:
    """Pick N identities, one RGB + one IR image each; pair them up.

    Positives are the N aligned same-identity pairs; negatives draw r*N
    slot pairs across distinct identities, without duplicates while the
    pool allows.
    """
    if n < 1 or r < 0:
        raise DataError(f"make_batch: need n >= 1 and r >= 0, got n={n}, r={r}")
    if n < 2 and r > 0:
        raise DataError("make_batch: negatives need at least 2 identities per batch")
    index = _index_by_identity(dataset)
    usable = sorted(i for i, g in index.items() if g[RGB] and g[IR])
    if len(usable) < n:
        raise DataError(
            f"make_batch: need {n} identities with both modalities, have {len(usable)}")
    chosen = rng.sample(usable, n)
    rgb_images = [rng.choice(index[i][RGB]) for i in chosen]
    ir_images = [rng.choice(index[i][IR]) for i in chosen]
    pairs = [(k, k, 0) for k in range(n)]
    needed = r * n
    pool = n * (n - 1)
    seen: set[tuple[int, int]] = set()
    while len(seen) < min(needed, pool):
        a = rng.randrange(n)
        b = (a + 1 + rng.randrange(n - 1)) % n
        seen.add((a, b))
    negatives = sorted(seen)
    while len(negatives) < needed:  # pool exhausted: reuse is permitted
        a = rng.randrange(n)
        b = (a + 1 + rng.randrange(n - 1)) % n
        negatives.append((a, b))
    for a, b in negatives[:needed]:
        pairs.append((a, b, 1))
    return PairBatch(rgb_images, ir_images, pairs, num_pos=n, num_neg=needed)


# --------------------------------------------------------------------------
# Dataset files
# --------------------------------------------------------------------------

def write_dataset(samples: Sequence[IdentitySample], path) -> None:
    with open(path, "wb") as fp:
        fp.write(DATASET_MAGIC)
        fileio.write_u8(fp, DATASET_VERSION)
        fileio.write_u32(fp, len(samples))
        for s in samples:
            fileio.write_u32(fp, s.identity)
            fileio.write_u8(fp, MODALITY_CODES[s.modality])
            fileio.write_tensor_block(fp, s.image.data)


def read_dataset(path) -> list[IdentitySample]:
    with open(path, "rb") as fp:
        fileio.expect_magic(fp, DATASET_MAGIC, "dataset")
        version = fileio.read_u8(fp, "dataset version")
        if version != DATASET_VERSION:
            raise fileio.BadVersionError(f"unknown dataset version {version}")
        count = fileio.read_u32(fp, "sample count")
        samples = []
        for _ in range(count):
            ident = fileio.read_u32(fp, "sample identity")
            code = fileio.read_u8(fp, "sample modality")
            if code not in CODE_MODALITIES:
                raise fileio.FileFormatError(f"unknown modality code {code}")
            image = fileio.read_tensor_block(fp)
            samples.append(IdentitySample(tensor(image, dtype=np.float32),
                                          identity=ident,
                                          modality=CODE_MODALITIES[code]))
    return samples
