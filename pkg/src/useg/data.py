"""Deterministic synthetic caption + mask datasets and their on-disk format.

Each image holds one target ellipse described by its caption plus up to two
distractor ellipses that differ from the target in at least one attribute.
Samples are grouped into "patients" sharing a background texture, and splits
and cross-validation folds are assigned per patient.

Directory layout::

    manifest.json          counts, seed, grammar version, sha256 per file
    captions.jsonl         {sample_id, patient_id, caption, split, fold[, lesions]}
    images/<id>.pgm        8-bit graymap, round(255 * intensity)
    masks/<id>.pgm         0 or 255
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from useg.errors import (
    ChecksumMismatch,
    CorruptManifest,
    InvalidConfig,
    MissingFile,
    PlacementFailure,
    TooFewPatients,
)

GRAMMAR_VERSION = "1"
SPLITS = ("train", "val", "test")
FULL_SCALE_COUNTS = {"train": 15040, "val": 3760, "test": 1807}
DESK_COUNTS = {"train": 200, "val": 50, "test": 50}

BACKGROUND_MEAN = 0.5
BACKGROUND_STD = 0.03


@dataclass(frozen=True)
class CaptionGrammar:
    sizes: Tuple[str, ...] = ("small", "large")
    attenuations: Tuple[str, ...] = ("hypoattenuating", "hyperattenuating", "enhancing")
    types: Tuple[str, ...] = ("nodule", "mass", "lymph node")
    locations: Tuple[str, ...] = ("upper left", "upper right", "lower left", "lower right", "center")
    version: str = GRAMMAR_VERSION

    @property
    def fields(self) -> Tuple[Tuple[str, ...], ...]:
        return (self.sizes, self.attenuations, self.types, self.locations)

    def all_tuples(self) -> List[Tuple[str, str, str, str]]:
        return list(itertools.product(*self.fields))

    def caption(self, attrs: Sequence[str]) -> str:
        size, att, typ, loc = attrs
        return f"{size} {att} {typ} in the {loc}"

    def parse(self, caption: str) -> Tuple[str, str, str, str]:
        alt = lambda xs: "|".join(re.escape(x) for x in sorted(xs, key=len, reverse=True))
        pat = rf"^({alt(self.sizes)}) ({alt(self.attenuations)}) ({alt(self.types)}) in the ({alt(self.locations)})$"
        m = re.match(pat, " ".join(caption.lower().split()))
        if not m:
            raise ValueError(f"caption does not follow the grammar: {caption!r}")
        return m.groups()


DEFAULT_GRAMMAR = CaptionGrammar()

# rendering constants, in pixels at H=64 (scaled linearly with H)
_SEMI_AXIS = {"small": (4.0, 6.0), "large": (11.0, 13.0)}
_ASPECT = {"nodule": (1.0, 1.15), "mass": (1.5, 1.7), "lymph node": (2.4, 2.8)}
_INTENSITY = {"hypoattenuating": 0.22, "hyperattenuating": 0.72, "enhancing": 0.92}
_INTENSITY_JITTER = 0.03
_GAP = 2  # minimum background pixels between blobs


@dataclass(frozen=True)
class LesionSpec:
    center: Tuple[float, float]
    semi_axes: Tuple[float, float]  # (major, minor)
    rotation: float
    intensity: float
    attrs: Tuple[str, str, str, str]

    def to_dict(self) -> dict:
        return {"center": list(self.center), "semi_axes": list(self.semi_axes), "rotation": self.rotation,
                "intensity": self.intensity, "attrs": list(self.attrs)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LesionSpec":
        return cls(tuple(d["center"]), tuple(d["semi_axes"]), float(d["rotation"]), float(d["intensity"]),
                   tuple(d["attrs"]))


def rasterize(spec: LesionSpec, size: int) -> np.ndarray:
    """Boolean mask of pixel centres inside the rotated ellipse."""
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    dr, dc = r - spec.center[0], c - spec.center[1]
    cos, sin = math.cos(spec.rotation), math.sin(spec.rotation)
    u = dr * cos + dc * sin
    v = -dr * sin + dc * cos
    a, b = spec.semi_axes
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def location_of(row: float, col: float, size: int) -> str:
    """Region name for a point: centre box of half-width H/8, else quadrant."""
    half = size / 2.0
    dr, dc = row - half, col - half
    if max(abs(dr), abs(dc)) <= size / 8.0:
        return "center"
    return f"{'upper' if dr < 0 else 'lower'} {'left' if dc < 0 else 'right'}"


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float64 in [0, 1], multiples of 1/255
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    caption: str
    patient_id: str
    sample_id: str
    split: str = "train"
    fold: int = 0
    lesions: Tuple[LesionSpec, ...] = ()  # target first, then distractors
    attempt: int = 0  # placement re-seeds needed

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (np.array_equal(self.image, other.image) and self.image.dtype == other.image.dtype
                and np.array_equal(self.mask, other.mask) and self.caption == other.caption
                and self.patient_id == other.patient_id and self.sample_id == other.sample_id
                and self.split == other.split and self.fold == other.fold and self.lesions == other.lesions)

    @property
    def target(self) -> Optional[LesionSpec]:
        return self.lesions[0] if self.lesions else None


def background(seed, size: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=2.0, mode="wrap")
    field_ = (field_ - field_.mean()) / field_.std()
    return BACKGROUND_MEAN + BACKGROUND_STD * field_


def _distractor_attrs(rng, target, grammar: CaptionGrammar, k: int) -> List[Tuple[str, ...]]:
    out = []
    if k >= 1:
        # one near-miss: differs from the target in exactly one attribute
        i = int(rng.integers(4))
        choices = [v for v in grammar.fields[i] if v != target[i]]
        near = list(target)
        near[i] = choices[int(rng.integers(len(choices)))]
        out.append(tuple(near))
    others = [t for t in grammar.all_tuples() if t != tuple(target)]
    for _ in range(k - 1):
        out.append(others[int(rng.integers(len(others)))])
    return out


def _place(rng, attrs, size: int, occupied: np.ndarray, tries: int = 200) -> Optional[Tuple[LesionSpec, np.ndarray]]:
    s = size / 64.0
    a = rng.uniform(*_SEMI_AXIS[attrs[0]]) * s
    b = a / rng.uniform(*_ASPECT[attrs[2]])
    rot = rng.uniform(0.0, math.pi)
    inten = _INTENSITY[attrs[1]] + rng.uniform(-_INTENSITY_JITTER, _INTENSITY_JITTER)
    half, box = size / 2.0, size / 8.0
    blocked = ndimage.binary_dilation(occupied, iterations=_GAP) if occupied.any() else occupied
    for _ in range(tries):
        if attrs[3] == "center":
            lim = box - 1.0
            r, c = half + rng.uniform(-lim, lim), half + rng.uniform(-lim, lim)
        else:
            lo, hi = a + 1.0, half - 1.0
            r, c = rng.uniform(lo, hi), rng.uniform(lo, hi)
            if attrs[3].startswith("lower"):
                r = size - 1 - r
            if attrs[3].endswith("right"):
                c = size - 1 - c
            if max(abs(r - half), abs(c - half)) < box + 2.0:
                continue
        if not (a + 0.5 <= r <= size - 1.5 - a and a + 0.5 <= c <= size - 1.5 - a):
            continue
        spec = LesionSpec((float(r), float(c)), (float(a), float(b)), float(rot), float(inten), tuple(attrs))
        m = rasterize(spec, size)
        if not (m & blocked).any() and m.sum() > 0:
            return spec, m
    return None


def _try_generate(rng, grammar, ambiguity, size, bg):
    target = tuple(grammar.all_tuples()[int(rng.integers(len(grammar.all_tuples())))])
    attrs = [target] + _distractor_attrs(rng, target, grammar, ambiguity)
    occupied = np.zeros((size, size), dtype=bool)
    specs, masks = [], []
    for at in attrs:
        placed = _place(rng, at, size, occupied)
        if placed is None:
            return None
        specs.append(placed[0])
        masks.append(placed[1])
        occupied |= placed[1]
    img = bg.copy()
    texture = 0.5 * (bg - BACKGROUND_MEAN)
    for spec, m in zip(specs, masks):
        img[m] = spec.intensity + texture[m]
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img, masks[0].astype(np.uint8), specs


def generate_sample(seed, grammar: CaptionGrammar = DEFAULT_GRAMMAR, ambiguity: int = 2, size: int = 64,
                    background_seed=None, patient_id: str = "P0000", sample_id: Optional[str] = None,
                    max_attempts: int = 20) -> Sample:
    """One image with a captioned target blob and ``ambiguity`` distractors.

    If the blobs cannot be placed, generation restarts from a seed derived
    from (seed, attempt); the attempt number is kept on the sample.
    """
    if size % 32:
        raise InvalidConfig(f"image size must be divisible by 32, got {size}")
    if ambiguity not in (0, 1, 2):
        raise InvalidConfig(f"ambiguity must be 0, 1 or 2, got {ambiguity}")
    seed_words = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    bg = background(background_seed if background_seed is not None else seed_words + [999], size)
    for attempt in range(max_attempts):
        rng = np.random.default_rng(seed_words + [attempt])
        got = _try_generate(rng, grammar, ambiguity, size, bg)
        if got is not None:
            img, mask, specs = got
            sid = sample_id if sample_id is not None else f"{patient_id}_s{'-'.join(map(str, seed_words))}"
            return Sample(img, mask, grammar.caption(specs[0].attrs), patient_id, sid,
                          lesions=tuple(specs), attempt=attempt)
    raise PlacementFailure(f"could not place {ambiguity + 1} blobs for seed {seed} in {max_attempts} attempts")


# --------------------------------------------------------------------------
# splitting


def fnv1a_64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _patient_order(patient_ids: Sequence[str], seed: int) -> List[str]:
    mask = seed & 0xFFFFFFFFFFFFFFFF
    return sorted(patient_ids, key=lambda p: (fnv1a_64(p) ^ mask, p))


def counts_from_ratios(n: int, ratios: Mapping[str, float]) -> Dict[str, int]:
    """Largest-remainder rounding of n * ratio per split."""
    if any(r < 0 for r in ratios.values()):
        raise InvalidConfig(f"split ratios must be non-negative: {dict(ratios)}")
    if sum(ratios.values()) > 1.0 + 1e-9:
        raise InvalidConfig(f"split ratios sum to {sum(ratios.values())} > 1")
    raw = {k: n * r for k, r in ratios.items()}
    counts = {k: int(math.floor(v + 1e-9)) for k, v in raw.items()}
    target = min(n, int(math.floor(sum(raw.values()) + 1e-9)))
    for k in sorted(raw, key=lambda k: (-(raw[k] - counts[k]), k)):
        if sum(counts.values()) >= target:
            break
        counts[k] += 1
    return counts


def assign_splits(patient_ids: Sequence[str], counts: Mapping[str, int], n_folds: int = 5,
                  seed: int = 0) -> Dict[str, Tuple[str, int]]:
    """patient_id -> (split, fold) with exact patient counts per split."""
    ids = list(dict.fromkeys(patient_ids))
    if len(ids) < n_folds:
        raise TooFewPatients(f"need at least {n_folds} patients, got {len(ids)}")
    if sum(counts.values()) > len(ids):
        raise InvalidConfig(f"split counts {dict(counts)} exceed {len(ids)} patients")
    order = _patient_order(ids, seed)
    out: Dict[str, Tuple[str, int]] = {}
    pos = 0
    n_test = counts.get("test", 0)
    for p in order[:n_test]:
        out[p] = ("test", pos % n_folds)
        pos += 1
    cv = order[n_test:]
    n_val = counts.get("val", 0)
    n_train = counts.get("train", len(cv) - n_val)
    for i, p in enumerate(cv[: n_val + n_train]):
        out[p] = ("val" if i < n_val else "train", i % n_folds)
    return out


def make_splits(patient_ids: Sequence[str], ratios: Mapping[str, float] = None, n_folds: int = 5,
                seed: int = 0) -> Dict[str, Tuple[str, int]]:
    """Patient-level split and fold assignment.

    Patients are ordered by 64-bit FNV-1a(patient_id) XOR seed. The first go
    to test, then val, then train; folds are dealt round-robin over the
    train+val patients so fold sizes differ by at most one.
    """
    ratios = ratios or {"train": 2 / 3, "val": 1 / 6, "test": 1 / 6}
    ids = list(dict.fromkeys(patient_ids))
    if len(ids) < n_folds:
        raise TooFewPatients(f"need at least {n_folds} patients, got {len(ids)}")
    return assign_splits(ids, counts_from_ratios(len(ids), ratios), n_folds, seed)


# --------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class GenerateConfig:
    n_samples: int = 300
    ratios: Mapping[str, float] = field(default_factory=lambda: {"train": 2 / 3, "val": 1 / 6, "test": 1 / 6})
    samples_per_patient: int = 4
    ambiguity: int = 2
    image_size: int = 64
    n_folds: int = 5
    seed: int = 0

    def validate(self) -> None:
        if set(self.ratios) - set(SPLITS):
            raise InvalidConfig(f"unknown split names in ratios: {sorted(set(self.ratios) - set(SPLITS))}")
        counts_from_ratios(self.n_samples, self.ratios)
        if self.samples_per_patient < 1 or self.n_samples < 1:
            raise InvalidConfig("n_samples and samples_per_patient must be positive")
        if self.ambiguity not in (0, 1, 2):
            raise InvalidConfig(f"ambiguity must be 0, 1 or 2, got {self.ambiguity}")
        if self.image_size % 32:
            raise InvalidConfig(f"image_size must be divisible by 32, got {self.image_size}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenerateConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown generation config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = dict(self.ratios)
        return d


def generate_dataset(cfg: GenerateConfig, grammar: CaptionGrammar = DEFAULT_GRAMMAR) -> List[Sample]:
    cfg.validate()
    k = cfg.samples_per_patient
    counts = counts_from_ratios(cfg.n_samples, cfg.ratios)
    patients_per_split = {s: -(-counts.get(s, 0) // k) for s in SPLITS}
    n_patients = sum(patients_per_split.values())
    ids = [f"P{i:04d}" for i in range(n_patients)]
    assignment = assign_splits(ids, patients_per_split, cfg.n_folds, cfg.seed)

    by_split: Dict[str, List[str]] = {s: [] for s in SPLITS}
    for p in _patient_order(ids, cfg.seed):
        if p in assignment:
            by_split[assignment[p][0]].append(p)
    samples = []
    for split in SPLITS:
        remaining = counts.get(split, 0)
        for p in by_split[split]:
            pidx = int(p[1:])
            for j in range(min(k, remaining)):
                s = generate_sample([cfg.seed, pidx, j], grammar, cfg.ambiguity, cfg.image_size,
                                    background_seed=[cfg.seed, pidx, 10_000], patient_id=p,
                                    sample_id=f"{p}_{j:02d}")
                s.split, s.fold = split, assignment[p][1]
                samples.append(s)
            remaining -= min(k, remaining)
    samples.sort(key=lambda s: s.sample_id)
    return samples


# --------------------------------------------------------------------------
# PGM + JSONL I/O


def write_pgm(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptManifest(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise CorruptManifest(f"{path}: only 8-bit binary PGM (P5, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1: pos + 1 + w * h]
    if len(data) != w * h:
        raise CorruptManifest(f"{path}: expected {w * h} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(samples: Sequence[Sample], out_dir, meta: Optional[Mapping] = None) -> dict:
    """Write samples in the directory format; returns the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        write_pgm(out / "images" / f"{s.sample_id}.pgm", np.round(s.image * 255.0).astype(np.uint8))
        write_pgm(out / "masks" / f"{s.sample_id}.pgm", (np.asarray(s.mask) > 0).astype(np.uint8) * 255)
        rec = {"sample_id": s.sample_id, "patient_id": s.patient_id, "caption": s.caption,
               "split": s.split, "fold": int(s.fold)}
        if s.lesions:
            rec["lesions"] = [l.to_dict() for l in s.lesions]
        lines.append(json.dumps(rec, sort_keys=True))
    (out / "captions.jsonl").write_text("".join(l + "\n" for l in lines))
    files = ["captions.jsonl"] + [f"{d}/{s.sample_id}.pgm" for s in samples for d in ("images", "masks")]
    manifest = {
        "counts": {sp: sum(s.split == sp for s in samples) for sp in SPLITS},
        "grammar_version": GRAMMAR_VERSION,
        "full_scale_counts": FULL_SCALE_COUNTS,
        "sha256": {f: _sha256(out / f) for f in sorted(files)},
    }
    manifest.update(dict(meta or {}))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir, verify: bool = True) -> Tuple[List[Sample], dict]:
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingFile(f"{mpath} not found")
    try:
        manifest = json.loads(mpath.read_text())
        sums = manifest["sha256"]
        counts = manifest["counts"]
    except (ValueError, KeyError) as exc:
        raise CorruptManifest(f"{mpath}: {exc}") from None
    if verify:
        for rel, digest in sorted(sums.items()):
            f = root / rel
            if not f.exists():
                raise MissingFile(f"{rel} listed in manifest but missing")
            if _sha256(f) != digest:
                raise ChecksumMismatch(f"{rel}: sha256 does not match manifest")
    cap_path = root / "captions.jsonl"
    if not cap_path.exists():
        raise MissingFile("captions.jsonl not found")
    records = [json.loads(l) for l in cap_path.read_text().splitlines() if l.strip()]
    found = {sp: sum(r["split"] == sp for r in records) for sp in SPLITS}
    if any(found.get(sp, 0) != counts.get(sp, 0) for sp in SPLITS):
        raise CorruptManifest(f"manifest counts {counts} disagree with captions.jsonl {found}")
    on_disk = {p.stem for p in (root / "images").glob("*.pgm")}
    if on_disk != {r["sample_id"] for r in records}:
        raise CorruptManifest("image files present do not match captions.jsonl entries")
    samples = []
    for r in records:
        sid = r["sample_id"]
        ip, mp = root / "images" / f"{sid}.pgm", root / "masks" / f"{sid}.pgm"
        for p in (ip, mp):
            if not p.exists():
                raise MissingFile(f"{p.relative_to(root)} missing")
        img = read_pgm(ip).astype(np.float64) / 255.0
        mask = (read_pgm(mp) > 127).astype(np.uint8)
        lesions = tuple(LesionSpec.from_dict(d) for d in r.get("lesions", ()))
        samples.append(Sample(img, mask, r["caption"], r["patient_id"], sid, r["split"], int(r["fold"]), lesions))
    return samples, manifest


# --------------------------------------------------------------------------
# selection helpers used by training


def select(samples: Iterable[Sample], split: Optional[str] = None, folds: Optional[Iterable[int]] = None,
           cv: bool = False) -> List[Sample]:
    """Filter by split name, or by fold over the train+val pool when ``cv`` is set."""
    out = []
    folds = set(folds) if folds is not None else None
    for s in samples:
        if cv:
            if s.split == "test":
                continue
        elif split is not None and s.split != split:
            continue
        if folds is not None and s.fold not in folds:
            continue
        out.append(s)
    return out
