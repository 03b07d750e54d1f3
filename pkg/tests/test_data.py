import json
import math
from pathlib import Path

import numpy as np
import pytest

from useg.data import (
    BACKGROUND_MEAN,
    DEFAULT_GRAMMAR,
    GenerateConfig,
    fnv1a_64,
    generate_dataset,
    generate_sample,
    load_dataset,
    make_splits,
    rasterize,
    read_pgm,
    select,
    write_dataset,
    write_pgm,
)
from useg.errors import ChecksumMismatch, CorruptManifest, InvalidConfig, MissingFile, TooFewPatients

H = 64


# --------------------------------------------------------------------------
# attribute re-derivation oracle


def derive_attrs(image, spec, size=H):
    """Attributes read back from a blob's rendered pixels and its ellipse geometry."""
    m = rasterize(spec, size)
    major, minor = spec.semi_axes
    if major <= size / 10:
        sz = "small"
    elif major >= size / 6:
        sz = "large"
    else:
        sz = "?"
    ratio = major / minor
    typ = "nodule" if ratio < 1.3 else "mass" if ratio < 2.0 else "lymph node"
    mean = float(image[m].mean())
    if mean < BACKGROUND_MEAN:
        att = "hypoattenuating"
    elif mean < 0.82:
        att = "hyperattenuating"
    else:
        att = "enhancing"
    rows, cols = np.nonzero(m)
    r, c = rows.mean(), cols.mean()
    if max(abs(r - size / 2), abs(c - size / 2)) <= size / 8:
        loc = "center"
    else:
        loc = f"{'upper' if r < size / 2 else 'lower'} {'left' if c < size / 2 else 'right'}"
    return (sz, att, typ, loc)


def test_same_seed_is_bit_identical():
    assert generate_sample(123) == generate_sample(123)
    assert generate_sample(123) != generate_sample(124)


def test_ambiguity_zero_has_one_blob():
    s = generate_sample(5, ambiguity=0)
    assert len(s.lesions) == 1
    np.testing.assert_array_equal(s.mask, rasterize(s.lesions[0], H).astype(np.uint8))


def test_caption_identifies_target_on_1000_samples():
    near_miss = 0
    for seed in range(1000):
        s = generate_sample([7, seed], ambiguity=2)
        caption_attrs = DEFAULT_GRAMMAR.parse(s.caption)
        derived = [derive_attrs(s.image, spec) for spec in s.lesions]
        assert derived[0] == caption_attrs, (seed, derived[0], caption_attrs)
        # a rule-based selector picking the blob matching the caption finds exactly the target
        assert [i for i, d in enumerate(derived) if d == caption_attrs] == [0]
        np.testing.assert_array_equal(s.mask, rasterize(s.lesions[0], H).astype(np.uint8))
        near_miss += any(sum(a != b for a, b in zip(d, caption_attrs)) == 1 for d in derived[1:])
    assert near_miss >= 900


def test_blobs_stay_inside_and_apart():
    for seed in range(100):
        s = generate_sample(seed, ambiguity=2)
        masks = [rasterize(l, H) for l in s.lesions]
        for m in masks:
            assert not (m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                assert not (masks[i] & masks[j]).any()


def test_images_are_8bit_exact():
    s = generate_sample(9)
    assert s.image.min() >= 0 and s.image.max() <= 1
    np.testing.assert_array_equal(np.round(s.image * 255) / 255, s.image)


def test_bad_sizes_rejected():
    with pytest.raises(InvalidConfig):
        generate_sample(0, size=48)
    with pytest.raises(InvalidConfig):
        generate_sample(0, ambiguity=3)


# --------------------------------------------------------------------------
# splits


def fnv1a_reference(s: str) -> int:
    # written from the published FNV-1a definition, independently of the package
    offset, prime = 14695981039346656037, 1099511628211
    h = offset
    for b in bytearray(s, "utf-8"):
        h = ((h ^ b) * prime) % (1 << 64)
    return h


def test_fnv1a_known_vectors():
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8
    for pid in ("P0000", "P0042", "patient-é"):
        assert fnv1a_64(pid) == fnv1a_reference(pid)


def test_split_order_recomputed_independently():
    ids = [f"P{i:04d}" for i in range(30)]
    seed = 17
    out = make_splits(ids, {"train": 0.6, "val": 0.2, "test": 0.2}, seed=seed)
    order = sorted(ids, key=lambda p: (fnv1a_reference(p) ^ seed, p))
    assert [p for p in order if out[p][0] == "test"] == order[:6]
    assert [p for p in order if out[p][0] == "val"] == order[6:12]
    assert [p for p in order if out[p][0] == "train"] == order[12:]


def test_ten_patients_five_folds():
    ids = [f"p{i}" for i in range(10)]
    out = make_splits(ids, {"train": 0.8, "val": 0.2}, n_folds=5, seed=3)
    folds = [f for split, f in out.values() if split in ("train", "val")]
    assert sorted(np.bincount(folds).tolist()) == [2, 2, 2, 2, 2]


@pytest.mark.parametrize("n", [5, 13, 40, 75])
def test_folds_balanced_and_splits_disjoint(n):
    ids = [f"id{i}" for i in range(n)]
    out = make_splits(ids, seed=n)
    assert set(out) == set(ids)
    cv = [f for s, f in out.values() if s != "test"]
    counts = np.bincount(cv, minlength=5)
    assert counts.max() - counts.min() <= 1


def test_split_errors():
    with pytest.raises(TooFewPatients):
        make_splits(["a", "b", "c"], n_folds=5)
    with pytest.raises(InvalidConfig):
        make_splits([f"p{i}" for i in range(10)], {"train": 0.8, "val": 0.3})


# --------------------------------------------------------------------------
# datasets on disk


@pytest.fixture(scope="module")
def desk():
    return generate_dataset(GenerateConfig())


def test_desk_defaults(desk):
    counts = {s: len(select(desk, s)) for s in ("train", "val", "test")}
    assert counts == {"train": 200, "val": 50, "test": 50}
    assert set(s.fold for s in desk) == {0, 1, 2, 3, 4}
    by_patient = {}
    for s in desk:
        by_patient.setdefault(s.patient_id, set()).add(s.split)
    assert all(len(v) == 1 for v in by_patient.values())


def test_cv_folds_cover_train_and_val(desk):
    pool = select(desk, cv=True)
    assert len(pool) == 250
    assert sum(len(select(desk, cv=True, folds=[k])) for k in range(5)) == 250


def _tree(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_round_trip_and_byte_identical_regeneration(tmp_path):
    cfg = GenerateConfig(n_samples=50, seed=4)
    a = generate_dataset(cfg)
    write_dataset(a, tmp_path / "a")
    write_dataset(generate_dataset(cfg), tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    loaded, manifest = load_dataset(tmp_path / "a")
    assert loaded == a
    assert manifest["counts"] == {s: len(select(a, s)) for s in ("train", "val", "test")}
    assert sum(manifest["counts"].values()) == 50
    lines = (tmp_path / "a" / "captions.jsonl").read_text().splitlines()
    assert {"sample_id", "patient_id", "caption", "split", "fold"} <= set(json.loads(lines[0]))


def test_truncated_image_is_named(tmp_path):
    write_dataset(generate_dataset(GenerateConfig(n_samples=10, samples_per_patient=2, seed=1)), tmp_path)
    victim = sorted((tmp_path / "images").glob("*.pgm"))[3]
    victim.write_bytes(victim.read_bytes()[:-10])
    with pytest.raises(ChecksumMismatch, match=victim.name):
        load_dataset(tmp_path)


def test_manifest_counts_disagree(tmp_path):
    write_dataset(generate_dataset(GenerateConfig(n_samples=10, samples_per_patient=2, seed=1)), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["counts"]["train"] += 1
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CorruptManifest):
        load_dataset(tmp_path)


def test_missing_file(tmp_path):
    write_dataset(generate_dataset(GenerateConfig(n_samples=10, samples_per_patient=2, seed=1)), tmp_path)
    sorted((tmp_path / "masks").glob("*.pgm"))[0].unlink()
    with pytest.raises(MissingFile):
        load_dataset(tmp_path)
    with pytest.raises(MissingFile):
        load_dataset(tmp_path / "nowhere")


def test_pgm_round_trip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(5, 7), dtype=np.uint8)
    write_pgm(tmp_path / "x.pgm", arr)
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), arr)
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")


def test_generate_config_validation():
    with pytest.raises(InvalidConfig):
        GenerateConfig.from_dict({"ratios": {"train": 0.7, "val": 0.2, "test": 0.2}})
    with pytest.raises(InvalidConfig):
        GenerateConfig.from_dict({"n_sample": 3})
