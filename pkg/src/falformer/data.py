"""Feature bags on disk, dataset manifests, and the synthetic MIL generator.

FALB binary layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"FALB"
    4       1     version (1)
    5       4     u32 N, number of tokens
    9       4     u32 d_f, feature dimension
    13      2     u16 byte length L of the UTF-8 bag id
    15      L     bag id
    15+L    1     u8 label
    16+L    4*N*d_f  float32 tokens, row-major
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    DuplicateIdError,
    ManifestError,
    ShapeOverflowError,
    TruncatedFileError,
    UnsupportedVersionError,
)

FALB_MAGIC = b"FALB"
FALB_VERSION = 1
SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("id", "path", "label", "split")
# 2**31 floats is 8 GiB, far beyond any bag this package handles
MAX_BAG_VALUES = 2 ** 31


@dataclass
class FeatureBag:
    id: str
    tokens: np.ndarray  # (N, d_f) float64
    label: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1 or self.tokens.shape[1] < 1:
            raise ShapeOverflowError(f"bag {self.id!r}: tokens must be a non-empty 2-D matrix, "
                                     f"got shape {self.tokens.shape}")
        if not np.isfinite(self.tokens).all():
            raise DataError(f"bag {self.id!r} has non-finite token values")
        if not 0 <= int(self.label) <= 255:
            raise DataError(f"bag {self.id!r}: label {self.label} out of range")
        self.label = int(self.label)

    @property
    def n_tokens(self):
        return self.tokens.shape[0]

    @property
    def d_f(self):
        return self.tokens.shape[1]


def encode_bag(bag):
    bag_id = bag.id.encode("utf-8")
    if len(bag_id) > 0xFFFF:
        raise DataError("bag id longer than 65535 bytes")
    n, d = bag.tokens.shape
    header = FALB_MAGIC + struct.pack("<BII", FALB_VERSION, n, d)
    header += struct.pack("<H", len(bag_id)) + bag_id + struct.pack("<B", bag.label)
    return header + np.ascontiguousarray(bag.tokens, dtype="<f4").tobytes()


def decode_bag(data, source="<bytes>"):
    if len(data) < 4 or data[:4] != FALB_MAGIC:
        if len(data) < 4 and FALB_MAGIC.startswith(data):
            raise TruncatedFileError(f"{source}: file ends inside the magic")
        raise BadMagicError(f"{source}: not a FALB file (magic {data[:4]!r})")
    fixed = struct.calcsize("<BIIH")
    if len(data) < 4 + fixed:
        raise TruncatedFileError(f"{source}: header truncated")
    version, n, d, id_len = struct.unpack_from("<BIIH", data, 4)
    if version != FALB_VERSION:
        raise UnsupportedVersionError(f"{source}: FALB version {version} not supported")
    if n == 0 or d == 0 or n * d > MAX_BAG_VALUES:
        raise ShapeOverflowError(f"{source}: invalid bag shape {n} x {d}")
    pos = 4 + fixed
    if len(data) < pos + id_len + 1:
        raise TruncatedFileError(f"{source}: header truncated")
    bag_id = data[pos:pos + id_len].decode("utf-8")
    label = data[pos + id_len]
    pos += id_len + 1
    expected = 4 * n * d
    remaining = len(data) - pos
    if remaining < expected:
        raise TruncatedFileError(f"{source}: payload has {remaining} bytes, shape needs {expected}")
    if remaining > expected:
        raise ShapeOverflowError(f"{source}: {remaining - expected} bytes beyond the declared shape")
    tokens = np.frombuffer(data, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    return FeatureBag(bag_id, tokens.astype(np.float64), label)


def save_bag(bag, path):
    Path(path).write_bytes(encode_bag(bag))


def load_bag(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"bag file not found: {path}")
    if path.suffix in (".csv", ".txt"):
        return load_text_bag(path)
    return decode_bag(path.read_bytes(), str(path))


def load_text_bag(path, bag_id=None, label=0):
    """Plain-text bag: one token per line, comma-separated values.

    Optional ``# id=<id>`` and ``# label=<n>`` comment lines set the metadata.
    """
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "id":
                bag_id = value.strip()
            elif key == "label":
                label = int(value)
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ShapeOverflowError(f"{path}: no tokens")
    if len({len(r) for r in rows}) != 1:
        raise ShapeOverflowError(f"{path}: rows have differing lengths")
    return FeatureBag(bag_id if bag_id is not None else path.stem, np.array(rows), label)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class BagRef:
    id: str
    path: Path
    label: int
    split: str

    def load(self):
        bag = load_bag(self.path)
        if bag.label != self.label:
            raise ManifestError(f"bag {self.id!r}: file label {bag.label} != manifest label {self.label}")
        return FeatureBag(self.id, bag.tokens, bag.label)


@dataclass
class Dataset:
    """Bags (or bag references) grouped by split."""

    splits: dict = field(default_factory=lambda: {s: [] for s in SPLITS})
    n_classes: int = 2

    def __getitem__(self, split):
        return self.splits[split]

    def sizes(self):
        return {s: len(v) for s, v in self.splits.items()}

    def load(self, split):
        """Materialise one split as :class:`FeatureBag` objects."""
        items = self.splits[split]
        bags = [it.load() if isinstance(it, BagRef) else it for it in items]
        dims = {b.d_f for b in bags}
        if len(dims) > 1:
            raise DataError(f"split {split!r} mixes feature dimensions {sorted(dims)}")
        for b in bags:
            if b.label >= self.n_classes:
                raise DataError(f"bag {b.id!r}: label {b.label} >= n_classes {self.n_classes}")
        return bags


def load_manifest(path):
    """Read a CSV manifest with columns ``id,path,label,split``.

    Relative bag paths are resolved against the manifest's directory. Bags are
    not opened here; use :meth:`Dataset.load`.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    dataset = Dataset()
    seen = set()
    labels = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(MANIFEST_FIELDS) - set(reader.fieldnames):
            raise ManifestError(f"{path}: header must contain {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, 2):
            bag_id = row["id"].strip()
            split = row["split"].strip()
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            if bag_id in seen:
                raise DuplicateIdError(bag_id)
            try:
                label = int(row["label"])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: label {row['label']!r} is not an integer") from None
            if label < 0:
                raise ManifestError(f"{path}:{lineno}: negative label")
            seen.add(bag_id)
            labels.add(label)
            bag_path = Path(row["path"].strip())
            if not bag_path.is_absolute():
                bag_path = path.parent / bag_path
            dataset.splits[split].append(BagRef(bag_id, bag_path, label, split))
    dataset.n_classes = max(2, max(labels) + 1) if labels else 2
    return dataset


def write_manifest(path, refs):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for ref in refs:
            p = Path(ref.path)
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            writer.writerow([ref.id, p.as_posix(), ref.label, ref.split])


# --------------------------------------------------------------------------
# synthetic MIL bags


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 60
    n_val: int = 20
    n_test: int = 20
    d_f: int = 32
    min_tokens: int = 64
    max_tokens: int = 256
    n_clusters: int = 8
    signal_cluster: int = 0
    signal_fraction: float = 0.2
    separation: float = 4.0
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not 0 < self.signal_fraction <= 1:
            raise ValueError("signal_fraction must be in (0, 1]")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if self.n_clusters < 2:
            raise ValueError("need at least one signal and one background cluster")
        if not 0 <= self.signal_cluster < self.n_clusters:
            raise ValueError("signal_cluster out of range")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")


def synth_centers(spec, rng):
    """Cluster centres on a sphere of radius ``separation * noise_sigma``."""
    dirs = rng.normal(size=(spec.n_clusters, spec.d_f))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * spec.separation * spec.noise_sigma


def _synth_bag(spec, centers, label, rng, bag_id):
    n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    background = [c for c in range(spec.n_clusters) if c != spec.signal_cluster]
    n_signal = math.ceil(spec.signal_fraction * n) if label == 1 else 0
    which = np.concatenate([
        np.full(n_signal, spec.signal_cluster),
        rng.choice(background, size=n - n_signal),
    ])
    rng.shuffle(which)
    tokens = centers[which] + spec.noise_sigma * rng.normal(size=(n, spec.d_f))
    # store exactly what a FALB round trip would give back
    tokens = tokens.astype(np.float32).astype(np.float64)
    return FeatureBag(bag_id, tokens, label)


def synth_generate(spec=SynthSpec(), seed=0):
    """Balanced synthetic MIL dataset.

    Negative bags draw every token from the background clusters; positive bags
    draw ``ceil(signal_fraction * N)`` tokens from the signal cluster and the
    rest from the background, so each positive bag holds at least one signal
    instance.
    """
    rng = np.random.default_rng(seed)
    centers = synth_centers(spec, rng)
    dataset = Dataset()
    offset = 0
    for split, count in zip(SPLITS, (spec.n_train, spec.n_val, spec.n_test)):
        # alternate labels across the concatenated splits so the total is balanced
        labels = (offset + np.arange(count)) % 2
        offset += count
        rng.shuffle(labels)
        dataset.splits[split] = [
            _synth_bag(spec, centers, int(lab), rng, f"{split}_{i:04d}")
            for i, lab in enumerate(labels)
        ]
    return dataset


def write_dataset(dataset, out_dir, manifest_name="manifest.csv"):
    """Write every in-memory bag as FALB plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from None
    refs = []
    for split in SPLITS:
        for bag in dataset.splits[split]:
            bag_path = out_dir / "bags" / f"{bag.id}.falb"
            try:
                save_bag(bag, bag_path)
            except OSError as exc:
                raise DataError(f"cannot write {bag_path}: {exc}") from None
            refs.append(BagRef(bag.id, bag_path, bag.label, split))
    manifest = out_dir / manifest_name
    write_manifest(manifest, refs)
    return manifest
