"""Data generator tests: PRNG streams, genomes, rendering invariants,
augmentation, batch contract, and the dataset file format.

The two nearest-centroid probes pin the dataset's difficulty axis: raw
pixels identify a person fine inside one modality and poorly across
modalities, so any cross-modality retrieval quality has to come from the
learned common space.
"""

import numpy as np
import pytest

from ccreid import datagen as dg
from ccreid import fileio


# ---------------------------------------------------------------------------
# PRNG


def test_uniform_block_matches_sequential_stream():
    rng = dg.SplitMix64(97)
    seq = [rng.next_float() for _ in range(40)]
    blk = dg.uniform_block(97, (40,))
    assert np.allclose(seq, blk, atol=0)


def test_splitmix_basics():
    rng = dg.SplitMix64(5)
    vals = [rng.next_u64() for _ in range(100)]
    assert len(set(vals)) == 100
    assert all(0.0 <= dg.SplitMix64(k).next_float() < 1.0 for k in range(50))
    with pytest.raises(ValueError):
        dg.SplitMix64(1).randrange(0)
    counts = [dg.SplitMix64(k).randrange(7) for k in range(200)]
    assert set(counts) == set(range(7))


def test_sample_draws_distinct_elements():
    rng = dg.SplitMix64(11)
    got = rng.sample(range(20), 8)
    assert len(got) == len(set(got)) == 8
    assert all(v in range(20) for v in got)
    with pytest.raises(ValueError):
        rng.sample(range(3), 4)


def test_derive_seed_mixes_all_parts():
    assert dg.derive_seed(1, 2, 3) == dg.derive_seed(1, 2, 3)
    assert dg.derive_seed(1, 2, 3) != dg.derive_seed(3, 2, 1)
    assert dg.derive_seed(1) != dg.derive_seed(1, 1)


# ---------------------------------------------------------------------------
# genomes and rendering


def test_genome_deterministic_and_distinct():
    a = dg.generate_identity(7, 3)
    assert a == dg.generate_identity(7, 3)
    genomes = [dg.generate_identity(7, i) for i in range(500)]
    assert len(set(genomes)) == 500
    with pytest.raises(ValueError):
        dg.generate_identity(7, -1)


def test_genome_fields_in_documented_ranges():
    for i in range(200):
        g = dg.generate_identity(123, i)
        assert 0.10 <= g.head_h <= 0.20
        assert 0.30 <= g.torso_h <= 0.48
        assert 0.28 <= g.head_w <= 0.55
        assert 0.52 <= g.torso_w <= 0.95
        assert 0.14 <= g.leg_w <= 0.30
        assert 1.0 <= g.stripe_freq <= 6.0
        assert 1.0 <= g.checker_freq <= 4.0
        assert 0.0 <= g.base_hue < 1.0 and 0.0 <= g.leg_hue < 1.0


def test_render_deterministic_and_bounded():
    g = dg.generate_identity(7, 0)
    a = dg.render(g, dg.RGB, 42)
    b = dg.render(g, dg.RGB, 42)
    assert np.array_equal(a.image.data, b.image.data)
    assert a.image.shape == (3, 64, 32)
    assert a.image.data.min() >= 0.0 and a.image.data.max() <= 1.0
    c = dg.render(g, dg.RGB, 43)
    assert not np.array_equal(a.image.data, c.image.data)
    with pytest.raises(ValueError):
        dg.render(g, "depth", 0)


def test_ir_channels_share_one_response():
    # infrared structure is single-channel; only additive noise differs
    g = dg.generate_identity(7, 4)
    img = dg.render(g, dg.IR, 9).image.data
    assert abs(float(img[0].mean() - img[1].mean())) < 0.01
    assert abs(float(img[0].mean() - img[2].mean())) < 0.01


def test_modality_gap_exceeds_floor():
    gaps = []
    for k in range(100):
        g = dg.generate_identity(7, k)
        a = dg.render(g, dg.RGB, 1000 + k).image.data
        b = dg.render(g, dg.IR, 1000 + k).image.data
        gaps.append(np.abs(a - b).mean(axis=(1, 2)))
    assert np.min(gaps) > 0.05


def _centroid_probe(by, ids, train_key, test_key, holdout: bool):
    cents, tests = {}, []
    for i in ids:
        tr, te = by[(i, train_key)], by[(i, test_key)]
        if holdout:
            cents[i] = np.mean(tr[:10], axis=0)
            tests.extend((i, v) for v in te[10:])
        else:
            cents[i] = np.mean(tr, axis=0)
            tests.extend((i, v) for v in te)
    mat = np.array([cents[i] for i in ids])
    hits = sum(ids[int(np.argmin(((mat - v) ** 2).sum(axis=1)))] == true_i
               for true_i, v in tests)
    return hits / len(tests)


def test_pixel_probe_separates_within_but_not_across_modalities():
    ds = dg.generate_dataset(7, 32, 20)
    by = {}
    for s in ds:
        by.setdefault((s.identity, s.modality), []).append(s.image.data.ravel())
    ids = sorted({i for i, _ in by})
    chance = 1.0 / len(ids)
    within = min(_centroid_probe(by, ids, dg.RGB, dg.RGB, True),
                 _centroid_probe(by, ids, dg.IR, dg.IR, True))
    cross = max(_centroid_probe(by, ids, dg.RGB, dg.IR, False),
                _centroid_probe(by, ids, dg.IR, dg.RGB, False))
    assert within > 5 * chance
    assert cross <= 2 * chance


def test_generate_dataset_layout():
    ds = dg.generate_dataset(3, 4, 5, first_id=10)
    assert len(ds) == 4 * 5 * 2
    idents = sorted({s.identity for s in ds})
    assert idents == [10, 11, 12, 13]
    for i in idents:
        for m in dg.MODALITIES:
            n = sum(1 for s in ds if s.identity == i and s.modality == m)
            assert n == 5
    again = dg.generate_dataset(3, 4, 5, first_id=10)
    for a, b in zip(ds, again):
        assert np.array_equal(a.image.data, b.image.data)


# ---------------------------------------------------------------------------
# augmentation


def _sample():
    g = dg.generate_identity(7, 1)
    s = dg.render(g, dg.RGB, 5)
    s.identity = 1
    return s


def test_augment_degenerate_config_is_identity():
    s = _sample()
    out = dg.augment(s, 0, 64, 32, 0.0, dg.SplitMix64(1))
    assert np.array_equal(out.image.data, s.image.data)
    assert out.identity == s.identity and out.modality == s.modality


def test_augment_forced_flip_is_involution():
    s = _sample()
    once = dg.augment(s, 0, 64, 32, 0.0, dg.SplitMix64(1), flip=True)
    twice = dg.augment(once, 0, 64, 32, 0.0, dg.SplitMix64(1), flip=True)
    assert not np.array_equal(once.image.data, s.image.data)
    assert np.array_equal(twice.image.data, s.image.data)


def test_augment_flip_override_beats_probability():
    s = _sample()
    out = dg.augment(s, 0, 64, 32, 1.0, dg.SplitMix64(1), flip=False)
    assert np.array_equal(out.image.data, s.image.data)


def test_augment_crop_stays_inside_padding():
    s = _sample()
    rng = dg.SplitMix64(2)
    for _ in range(20):
        out = dg.augment(s, 4, 64, 32, 0.0, rng)
        assert out.image.shape == (3, 64, 32)
        assert out.image.data.min() >= 0.0


def test_augment_validates():
    s = _sample()
    with pytest.raises(ValueError):
        dg.augment(s, -1, 64, 32, 0.0, dg.SplitMix64(1))
    with pytest.raises(ValueError):
        dg.augment(s, 1, 67, 32, 0.0, dg.SplitMix64(1))


# ---------------------------------------------------------------------------
# batch contract


def test_make_batch_contract_holds_over_many_seeds():
    ds = dg.generate_dataset(7, 8, 3)
    for seed in range(50):
        rng = dg.SplitMix64(seed)
        batch = dg.make_batch(ds, 6, 3, rng)
        assert len(batch.rgb_images) == len(batch.ir_images) == 6
        assert batch.num_pos == 6 and batch.num_neg == 18
        assert len(batch.pair_index) == 24
        negs = set()
        for a, b, label in batch.pair_index:
            ia = batch.rgb_images[a].identity
            ib = batch.ir_images[b].identity
            if label == 0:
                assert a == b and ia == ib
            else:
                assert ia != ib
                negs.add((a, b))
        assert len(negs) == 18  # pool of 30 allows all-distinct negatives


def test_make_batch_r_zero_gives_only_positives():
    ds = dg.generate_dataset(7, 4, 2)
    batch = dg.make_batch(ds, 3, 0, dg.SplitMix64(0))
    assert batch.num_neg == 0
    assert all(label == 0 for _, _, label in batch.pair_index)


def test_make_batch_reuses_when_pool_exhausted():
    ds = dg.generate_dataset(7, 2, 2)
    batch = dg.make_batch(ds, 2, 3, dg.SplitMix64(0))
    # only 2 cross-identity slot pairs exist; 6 negatives must reuse them
    assert batch.num_neg == 6
    assert {(a, b) for a, b, l in batch.pair_index if l == 1} == {(0, 1), (1, 0)}


def test_make_batch_rejects_bad_requests():
    ds = dg.generate_dataset(7, 3, 2)
    with pytest.raises(dg.DataError):
        dg.make_batch(ds, 4, 1, dg.SplitMix64(0))
    with pytest.raises(dg.DataError):
        dg.make_batch(ds, 1, 1, dg.SplitMix64(0))
    with pytest.raises(dg.DataError):
        dg.make_batch(ds, 0, 0, dg.SplitMix64(0))


# ---------------------------------------------------------------------------
# dataset files


def test_dataset_roundtrip(tmp_path):
    ds = dg.generate_dataset(7, 2, 3)
    path = tmp_path / "mini.cmds"
    dg.write_dataset(ds, path)
    back = dg.read_dataset(path)
    assert len(back) == len(ds)
    for a, b in zip(ds, back):
        assert a.identity == b.identity and a.modality == b.modality
        assert a.image.data.dtype == b.image.data.dtype
        assert np.array_equal(a.image.data, b.image.data)


def test_empty_dataset_roundtrip(tmp_path):
    path = tmp_path / "empty.cmds"
    dg.write_dataset([], path)
    assert dg.read_dataset(path) == []


def test_dataset_bad_magic(tmp_path):
    path = tmp_path / "bad.cmds"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(fileio.BadMagicError):
        dg.read_dataset(path)


def test_dataset_bad_version(tmp_path):
    ds = dg.generate_dataset(7, 1, 1)
    path = tmp_path / "v.cmds"
    dg.write_dataset(ds, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 250
    path.write_bytes(bytes(raw))
    with pytest.raises(fileio.BadVersionError):
        dg.read_dataset(path)


def test_dataset_truncation_detected(tmp_path):
    ds = dg.generate_dataset(7, 1, 2)
    path = tmp_path / "t.cmds"
    dg.write_dataset(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 7])
    with pytest.raises(fileio.TruncatedPayloadError):
        dg.read_dataset(path)
