"""Synthetic benchmark generation, binary feature files, and checkpoints.

On-disk layout of a dataset split:

* ``<split>.feat`` -- binary container: magic ``CAMPFEAT``, version u16,
  dim u32, count u32, then count*dim little-endian float32 values. All
  region rows of all images, stacked in image order.
* ``<split>.manifest.json`` -- structured sidecar mapping items to feature
  rows and caption token lists, with the ground-truth pairing.

Checkpoints use a similar container (magic ``CAMPCKPT``): a JSON header
describing config, parameter names/shapes, optimizer state and RNG state,
followed by the raw little-endian float64 payload. Serialization is fully
deterministic so identical runs produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camp.config import PAD_TOKEN, ModelConfig, SyntheticSpec

FEATURE_MAGIC = b"CAMPFEAT"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"CAMPCKPT"
CHECKPOINT_VERSION = 1
MANIFEST_FORMAT = "camp-manifest"
MANIFEST_VERSION = 1

_MAX_SET_RETRIES = 1000


class DataError(Exception):
    """Base class for dataset/checkpoint I/O failures."""


class MagicError(DataError):
    """File does not start with the expected magic bytes."""


class VersionError(DataError):
    """File format version is not supported."""


class TruncationError(DataError):
    """Declared payload size disagrees with the actual file size."""


class PayloadError(DataError):
    """Payload holds non-finite values."""


@dataclass
class SyntheticMeta:
    """Generation-time ground truth, kept for verification."""

    spec: SyntheticSpec
    prototypes: np.ndarray  # (n_concepts, raw_region_dim) float32
    concept_sets: list[tuple[int, ...]]  # per pair, sorted concept ids
    region_labels: list[np.ndarray]  # per image, concept id or -1 per region


@dataclass
class Dataset:
    """In-memory retrieval dataset: images, captions, and their pairing."""

    regions: list[np.ndarray]  # per image, (raw_region_dim, R) float32
    captions: list[list[int]]  # per caption, unpadded token ids
    cap_to_img: list[int]  # ground-truth image index per caption
    vocab_size: int
    meta: SyntheticMeta | None = None

    def __post_init__(self):
        if any(i < 0 or i >= len(self.regions) for i in self.cap_to_img):
            raise DataError("caption ground truth points outside the image list")
        if len(self.cap_to_img) != len(self.captions):
            raise DataError("every caption needs a ground-truth image")

    def __len__(self) -> int:
        return len(self.captions)

    @property
    def n_images(self) -> int:
        return len(self.regions)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic train/val/test datasets with planted alignments.

    Each pair draws a concept set nobody else uses, so its caption tokens
    identify its image uniquely. Regions are noisy prototype copies (plus
    pure-noise distractors); captions interleave concept tokens with
    fillers in random order.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.n_pairs + spec.val_pairs + spec.test_pairs
    prototypes = rng.normal(size=(spec.n_concepts, spec.raw_region_dim)).astype(np.float32)

    filler_ids = list(range(spec.n_concepts + 1, spec.vocab_size))
    k = spec.concepts_per_pair
    n_fill = spec.words_per_caption - k
    if n_fill > 0 and not filler_ids:
        raise DataError(
            "vocab has no filler tokens but captions are longer than the concept set"
        )

    seen: set[tuple[int, ...]] = set()
    concept_sets: list[tuple[int, ...]] = []
    for _ in range(total):
        for _attempt in range(_MAX_SET_RETRIES):
            chosen = tuple(sorted(rng.choice(spec.n_concepts, size=k, replace=False).tolist()))
            if chosen not in seen:
                seen.add(chosen)
                concept_sets.append(chosen)
                break
        else:
            raise DataError(
                f"could not draw {total} distinct concept sets of size {k} "
                f"from {spec.n_concepts} concepts"
            )

    all_regions: list[np.ndarray] = []
    all_labels: list[np.ndarray] = []
    all_captions: list[list[int]] = []
    r = spec.regions_per_image
    n_distract = spec.distractor_count
    for concepts in concept_sets:
        labels = np.full(r, -1, dtype=np.int64)
        concept_slots = rng.permutation(r)[: r - n_distract]
        for slot_rank, slot in enumerate(np.sort(concept_slots)):
            labels[slot] = concepts[slot_rank % len(concepts)]
        cols = np.empty((spec.raw_region_dim, r), dtype=np.float32)
        for j in range(r):
            noise = (spec.noise_sigma * rng.normal(size=spec.raw_region_dim)).astype(np.float32)
            if labels[j] >= 0:
                cols[:, j] = prototypes[labels[j]] + noise
            else:
                cols[:, j] = rng.normal(size=spec.raw_region_dim).astype(np.float32) + noise
        all_regions.append(cols)
        all_labels.append(labels)

        tokens = [c + 1 for c in concepts]  # token id = concept id + 1 (0 is padding)
        if n_fill > 0:
            tokens += rng.choice(filler_ids, size=n_fill, replace=True).tolist()
        order = rng.permutation(len(tokens))
        all_captions.append([int(tokens[i]) for i in order])

    def slice_split(start: int, count: int) -> Dataset:
        stop = start + count
        meta = SyntheticMeta(
            spec=spec,
            prototypes=prototypes,
            concept_sets=concept_sets[start:stop],
            region_labels=all_labels[start:stop],
        )
        return Dataset(
            regions=all_regions[start:stop],
            captions=all_captions[start:stop],
            cap_to_img=list(range(count)),
            vocab_size=spec.vocab_size,
            meta=meta,
        )

    train = slice_split(0, spec.n_pairs)
    val = slice_split(spec.n_pairs, spec.val_pairs)
    test = slice_split(spec.n_pairs + spec.val_pairs, spec.test_pairs)
    return train, val, test


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_feature_file(path, array: np.ndarray) -> None:
    """Write a (count, dim) float array as the binary feature container."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"feature payload must be 2-d, got shape {arr.shape}")
    count, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HII", FEATURE_VERSION, dim, count))
        fh.write(arr.astype("<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    """Read and validate a feature container; returns (count, dim) float32."""
    path = Path(path)
    size = path.stat().st_size
    header_len = len(FEATURE_MAGIC) + struct.calcsize("<HII")
    with open(path, "rb") as fh:
        magic = fh.read(len(FEATURE_MAGIC))
        if magic != FEATURE_MAGIC:
            raise MagicError(f"{path}: expected magic {FEATURE_MAGIC!r}, found {magic!r}")
        version, dim, count = struct.unpack("<HII", fh.read(struct.calcsize("<HII")))
        if version != FEATURE_VERSION:
            raise VersionError(f"{path}: unsupported feature version {version}")
        expected = header_len + count * dim * 4
        if expected != size:  # validate before allocating the payload
            raise TruncationError(
                f"{path}: header declares {count}x{dim} floats "
                f"({expected} bytes) but file has {size} bytes"
            )
        payload = np.frombuffer(fh.read(), dtype="<f4").reshape(count, dim)
    if not np.isfinite(payload).all():
        raise PayloadError(f"{path}: payload contains non-finite values")
    return payload.astype(np.float32)


def save_dataset(ds: Dataset, out_dir, split: str) -> Path:
    """Write ``<split>.feat`` + ``<split>.manifest.json``; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = np.concatenate([r.T for r in ds.regions], axis=0)  # (sum R_i, dim)
    feat_name = f"{split}.feat"
    write_feature_file(out_dir / feat_name, rows)

    images = []
    start = 0
    for r in ds.regions:
        images.append({"row_start": start, "row_count": r.shape[1]})
        start += r.shape[1]
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "feature_file": feat_name,
        "raw_region_dim": int(ds.regions[0].shape[0]) if ds.regions else 0,
        "vocab_size": ds.vocab_size,
        "images": images,
        "captions": [
            {"tokens": c, "image_index": g} for c, g in zip(ds.captions, ds.cap_to_img)
        ],
    }
    manifest_path = out_dir / f"{split}.manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return manifest_path


def load_features(manifest_path) -> Dataset:
    """Load a dataset split from its manifest; validates the feature payload."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise MagicError(f"{manifest_path}: not a {MANIFEST_FORMAT} file")
    if manifest.get("version") != MANIFEST_VERSION:
        raise VersionError(f"{manifest_path}: unsupported manifest version")
    rows = read_feature_file(manifest_path.parent / manifest["feature_file"])
    regions = []
    for im in manifest["images"]:
        start, count = im["row_start"], im["row_count"]
        if start + count > rows.shape[0]:
            raise TruncationError(
                f"{manifest_path}: image rows [{start}, {start + count}) exceed payload"
            )
        regions.append(np.ascontiguousarray(rows[start : start + count].T))
    return Dataset(
        regions=regions,
        captions=[list(map(int, c["tokens"])) for c in manifest["captions"]],
        cap_to_img=[int(c["image_index"]) for c in manifest["captions"]],
        vocab_size=int(manifest["vocab_size"]),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Snapshot of model parameters plus enough state to resume training."""

    model_cfg: ModelConfig
    params: dict[str, np.ndarray]
    best_rsum: float = 0.0
    epoch: int = 0
    rng_state: dict | None = None
    opt_state: dict | None = None  # {"step": int, "m": {...}, "v": {...}}
    version: int = CHECKPOINT_VERSION


def _array_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"params/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.opt_state is not None:
        for group in ("m", "v"):
            for k, arr in ckpt.opt_state[group].items():
                entries.append((f"opt/{group}/{k}", arr))
    return entries


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = _array_entries(ckpt)
    header = {
        "model_cfg": ckpt.model_cfg.to_dict(),
        "best_rsum": ckpt.best_rsum,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "opt_step": None if ckpt.opt_state is None else ckpt.opt_state["step"],
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise MagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, found {magic!r}")
        version, header_len = struct.unpack("<HI", fh.read(struct.calcsize("<HI")))
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = header["arrays"]
        payload_len = sum(int(np.prod(a["shape"])) for a in arrays) * 8
        expected = len(CHECKPOINT_MAGIC) + struct.calcsize("<HI") + header_len + payload_len
        if expected != size:
            raise TruncationError(
                f"{path}: header declares {payload_len} payload bytes, file has "
                f"{size - (expected - payload_len)}"
            )
        loaded: dict[str, np.ndarray] = {}
        for spec_entry in arrays:
            shape = tuple(spec_entry["shape"])
            n = int(np.prod(shape))
            arr = np.frombuffer(fh.read(n * 8), dtype="<f8").reshape(shape)
            loaded[spec_entry["name"]] = arr.astype(np.float64)
    for name, arr in loaded.items():
        if not np.isfinite(arr).all():
            raise PayloadError(f"{path}: array {name!r} holds non-finite values")

    params = {k.removeprefix("params/"): v for k, v in loaded.items() if k.startswith("params/")}
    opt_state = None
    if header["opt_step"] is not None:
        opt_state = {
            "step": int(header["opt_step"]),
            "m": {k.removeprefix("opt/m/"): v for k, v in loaded.items() if k.startswith("opt/m/")},
            "v": {k.removeprefix("opt/v/"): v for k, v in loaded.items() if k.startswith("opt/v/")},
        }
    return Checkpoint(
        model_cfg=ModelConfig.from_dict(header["model_cfg"]),
        params=params,
        best_rsum=float(header["best_rsum"]),
        epoch=int(header["epoch"]),
        rng_state=header["rng_state"],
        opt_state=opt_state,
        version=version,
    )
