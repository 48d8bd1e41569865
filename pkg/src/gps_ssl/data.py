"""Datasets, synthetic generators, hierarchical splitting and bank/manifest I/O."""

from __future__ import annotations

import base64
import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ArgumentError, FormatError, SplitError

BANK_MAGIC = b"GPSBANK1"
_BANK_HEADER = struct.Struct("<8sQQ")


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror an H x W x C image left to right."""
    return image[:, ::-1, :]


def _frozen(image: np.ndarray) -> np.ndarray:
    arr = np.array(image, dtype=np.float64, copy=True)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Sample:
    id: int
    image: np.ndarray
    branch_label: Optional[int] = None
    chain_label: Optional[int] = None

    def __post_init__(self):
        img = _frozen(self.image)
        object.__setattr__(self, "image", img)
        if self.id < 0:
            raise ArgumentError(f"sample id must be non-negative, got {self.id}")
        if img.ndim != 3 or min(img.shape) < 1:
            raise ArgumentError(f"sample {self.id}: image must be H x W x C, got shape {img.shape}")
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            raise ArgumentError(f"sample {self.id}: pixel values must lie in [0, 1]")
        if self.chain_label is not None and self.branch_label is None:
            raise ArgumentError(f"sample {self.id}: chain label without branch label")


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    name: str = "dataset"
    closure_tag: Optional[str] = None

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        if [s.id for s in samples] != list(range(len(samples))):
            raise ArgumentError("sample ids must be exactly 0..N-1 in order")
        owner: dict[int, int] = {}
        for s in samples:
            if s.chain_label is None:
                continue
            prev = owner.setdefault(s.branch_label, s.chain_label)
            if prev != s.chain_label:
                raise ArgumentError(f"branch {s.branch_label} belongs to chains {prev} and {s.chain_label}")
        if self.closure_tag == "hflip" and not is_flip_closed(self):
            raise ArgumentError("dataset tagged 'hflip' is not closed under horizontal flip")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @cached_property
    def images(self) -> np.ndarray:
        """All images stacked as an N x H x W x C read-only array."""
        arr = np.stack([s.image for s in self.samples])
        arr.setflags(write=False)
        return arr

    @cached_property
    def branch_labels(self) -> np.ndarray:
        if any(s.branch_label is None for s in self.samples):
            raise ArgumentError(f"dataset {self.name!r} is not fully labeled")
        return np.array([s.branch_label for s in self.samples], dtype=np.int64)

    @cached_property
    def chain_labels(self) -> np.ndarray:
        if any(s.chain_label is None for s in self.samples):
            raise ArgumentError(f"dataset {self.name!r} has no chain labels")
        return np.array([s.chain_label for s in self.samples], dtype=np.int64)

    @property
    def is_labeled(self) -> bool:
        return all(s.branch_label is not None and s.chain_label is not None for s in self.samples)

    def subset(self, ids: Sequence[int], name: Optional[str] = None) -> "Dataset":
        """Renumbered copy holding ``ids`` in the given order (new id j <- ids[j])."""
        picked = [self.samples[int(i)] for i in ids]
        return Dataset(
            samples=tuple(
                Sample(j, s.image, s.branch_label, s.chain_label) for j, s in enumerate(picked)
            ),
            name=name or f"{self.name}-subset",
        )


def is_flip_closed(dataset: Dataset) -> bool:
    """Exhaustive check that every image's mirror is also in the dataset."""
    keys = {(s.image.shape, s.image.tobytes()) for s in dataset.samples}
    return all(
        (s.image.shape, np.ascontiguousarray(hflip(s.image)).tobytes()) in keys for s in dataset.samples
    )


def mirror_ids(dataset: Dataset) -> np.ndarray:
    """For each id, the lowest id whose image is its exact mirror (-1 if none)."""
    first: dict[bytes, int] = {}
    for s in dataset.samples:
        first.setdefault(s.image.tobytes(), s.id)
    return np.array(
        [first.get(np.ascontiguousarray(hflip(s.image)).tobytes(), -1) for s in dataset.samples],
        dtype=np.int64,
    )


def _smooth_field(rng: np.random.Generator, hw: int, channels: int, cells: int) -> np.ndarray:
    """Random low-frequency field in [-1, 1]: a coarse grid upsampled bilinearly."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells, channels))
    pos = np.linspace(0.0, cells - 1.0, hw)
    i0 = np.clip(np.floor(pos).astype(int), 0, cells - 2)
    t = pos - i0
    rows = coarse[i0] * (1 - t)[:, None, None] + coarse[i0 + 1] * t[:, None, None]
    return rows[:, i0] * (1 - t)[None, :, None] + rows[:, i0 + 1] * t[None, :, None]


def generate_synthetic(
    num_chains: int,
    branches_per_chain: int,
    per_branch: int,
    image_hw: int,
    noise_std: float,
    flip_closed: bool,
    seed: int,
    *,
    channels: int = 3,
    branch_spread: float = 0.35,
    name: str = "synthetic",
) -> Dataset:
    """Hierarchically labeled toy images.

    Each chain owns a smooth random pattern; each branch adds its own smooth
    perturbation (amplitude ``branch_spread``) to obtain a prototype.  Samples
    are the prototype plus i.i.d. Gaussian pixel noise, clipped to [0, 1].
    With ``flip_closed`` every generated sample is followed by its exact
    mirror, so a branch holds ``2 * per_branch`` images.
    """
    if min(num_chains, branches_per_chain, per_branch, channels) < 1:
        raise ArgumentError("all counts must be >= 1")
    if image_hw < 4:
        raise ArgumentError(f"image_hw must be >= 4, got {image_hw}")
    if not noise_std >= 0:
        raise ArgumentError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    cells = max(2, min(4, image_hw // 2))
    samples: list[Sample] = []
    branch = 0
    for chain in range(num_chains):
        base = 0.5 + 0.3 * _smooth_field(rng, image_hw, channels, cells)
        for _ in range(branches_per_chain):
            proto = base + branch_spread * 0.5 * _smooth_field(rng, image_hw, channels, cells + 1)
            for _ in range(per_branch):
                img = np.clip(proto + rng.normal(0.0, noise_std, size=proto.shape), 0.0, 1.0)
                samples.append(Sample(len(samples), img, branch, chain))
                if flip_closed:
                    samples.append(Sample(len(samples), hflip(img), branch, chain))
            branch += 1
    return Dataset(tuple(samples), name=name, closure_tag="hflip" if flip_closed else None)


@dataclass(frozen=True)
class SplitSpec:
    train_ids: frozenset = field(default_factory=frozenset)
    dss_ids: frozenset = field(default_factory=frozenset)
    dsu_ids: frozenset = field(default_factory=frozenset)
    duu_ids: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        for name in ("train_ids", "dss_ids", "dsu_ids", "duu_ids"):
            object.__setattr__(self, name, frozenset(int(i) for i in getattr(self, name)))

    def sorted(self, tier: str) -> list[int]:
        return sorted(getattr(self, f"{tier}_ids"))

    def to_dict(self) -> dict:
        return {t: self.sorted(t) for t in ("train", "dss", "dsu", "duu")}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(*(d[t] for t in ("train", "dss", "dsu", "duu")))


def split_violations(dataset: Dataset, split: SplitSpec) -> list[str]:
    """Return human-readable violations of the split invariants (empty if valid)."""
    out = []
    tiers = {"train": split.train_ids, "dss": split.dss_ids, "dsu": split.dsu_ids, "duu": split.duu_ids}
    names = list(tiers)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if tiers[a] & tiers[b]:
                out.append(f"{a} and {b} overlap")
    branches = dataset.branch_labels
    chains = dataset.chain_labels

    def br(ids):
        return {int(branches[i]) for i in ids}

    def ch(ids):
        return {int(chains[i]) for i in ids}

    if ch(split.duu_ids) & ch(split.train_ids):
        out.append("duu shares chains with train")
    if br(split.dsu_ids) & br(split.train_ids):
        out.append("dsu shares branches with train")
    if not ch(split.dsu_ids) <= ch(split.train_ids):
        out.append("dsu has chains unseen in train")
    if not br(split.dss_ids) <= br(split.train_ids):
        out.append("dss has branches unseen in train")
    return out


def split_hierarchical(
    dataset: Dataset,
    frac_unseen_chains: float = 0.25,
    frac_unseen_branches: float = 0.25,
    frac_heldout_images: float = 0.25,
    seed: int = 0,
) -> SplitSpec:
    """Three-stage chain/branch/image split into train, D_SS, D_SU and D_UU.

    1. ``ceil(frac_unseen_chains * #chains)`` whole chains go to duu.
    2. ``ceil(frac_unseen_branches * #remaining branches)`` whole branches go to
       dsu, never taking the last training branch of a chain.
    3. Every remaining branch sends ``ceil(frac_heldout_images * n)`` of its
       images (at most n - 1) to dss and the rest to train.
    """
    for nm, f in (("frac_unseen_chains", frac_unseen_chains),
                  ("frac_unseen_branches", frac_unseen_branches),
                  ("frac_heldout_images", frac_heldout_images)):
        if not 0.0 < f < 1.0:
            raise ArgumentError(f"{nm} must lie in (0, 1), got {f}")
    if not dataset.is_labeled:
        raise ArgumentError("split_hierarchical needs branch and chain labels on every sample")
    rng = np.random.default_rng(seed)
    branches = dataset.branch_labels
    chains = dataset.chain_labels
    all_chains = np.unique(chains)

    n_uu = math.ceil(frac_unseen_chains * len(all_chains))
    if n_uu >= len(all_chains):
        raise SplitError("train", f"reserving {n_uu} of {len(all_chains)} chains leaves none for training")
    uu_chains = set(rng.choice(all_chains, size=n_uu, replace=False).tolist())

    branch_chain = {int(b): int(c) for b, c in zip(branches, chains)}
    remaining = sorted(b for b, c in branch_chain.items() if c not in uu_chains)
    left_in_chain: dict[int, int] = {}
    for b in remaining:
        left_in_chain[branch_chain[b]] = left_in_chain.get(branch_chain[b], 0) + 1
    n_su = math.ceil(frac_unseen_branches * len(remaining))
    su_branches: set[int] = set()
    for b in rng.permutation(remaining).tolist():
        if len(su_branches) == n_su:
            break
        if left_in_chain[branch_chain[b]] > 1:
            su_branches.add(b)
            left_in_chain[branch_chain[b]] -= 1
    if not su_branches:
        raise SplitError("dsu", "every remaining chain has a single branch")

    train, dss, dsu, duu = [], [], [], []
    for b in remaining:
        ids = np.flatnonzero(branches == b)
        if b in su_branches:
            dsu.extend(ids.tolist())
            continue
        ids = rng.permutation(ids)
        n_ss = min(math.ceil(frac_heldout_images * len(ids)), len(ids) - 1)
        dss.extend(ids[:n_ss].tolist())
        train.extend(ids[n_ss:].tolist())
    duu = np.flatnonzero(np.isin(chains, list(uu_chains))).tolist()
    if not dss:
        raise SplitError("dss", "every training branch holds a single image")
    return SplitSpec(train, dss, dsu, duu)


def holdout_split(dataset: Dataset, frac: float, seed: int) -> tuple[list[int], list[int]]:
    """Per-branch image holdout: (train_ids, test_ids), every branch in both when possible."""
    rng = np.random.default_rng(seed)
    branches = dataset.branch_labels
    train, test = [], []
    for b in np.unique(branches):
        ids = rng.permutation(np.flatnonzero(branches == b))
        n = min(math.ceil(frac * len(ids)), len(ids) - 1)
        test.extend(ids[:n].tolist())
        train.extend(ids[n:].tolist())
    return sorted(train), sorted(test)


# -- embedding bank files ---------------------------------------------------

def save_bank(path, embeddings) -> None:
    """Write an N x D matrix as ``GPSBANK1`` + u64 N + u64 D + float32 payload."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
        raise FormatError(f"bank must be a non-empty N x D matrix, got shape {emb.shape}")
    if not np.all(np.isfinite(emb)):
        raise FormatError("bank contains non-finite values")
    payload = np.ascontiguousarray(emb, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise FormatError("bank values overflow float32")
    with open(path, "wb") as fh:
        fh.write(_BANK_HEADER.pack(BANK_MAGIC, emb.shape[0], emb.shape[1]))
        fh.write(payload.tobytes())


def load_bank(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _BANK_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, d = _BANK_HEADER.unpack_from(raw)
    if magic != BANK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: empty bank ({n} x {d})")
    expected = _BANK_HEADER.size + n * d * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n} x {d}, found {len(raw)}")
    emb = np.frombuffer(raw, dtype="<f4", offset=_BANK_HEADER.size).reshape(n, d).astype(np.float32)
    if not np.all(np.isfinite(emb)):
        raise FormatError(f"{path}: bank contains non-finite values")
    return emb


# -- portable pixmaps -------------------------------------------------------

def _pnm_tokens(raw: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    tokens = []
    while len(tokens) < count:
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
            raise FormatError("truncated PNM header")
        tokens.append(raw[start:pos])
    return tokens, pos


def read_pnm(path) -> np.ndarray:
    """Read a P2/P3/P5/P6 portable any-map into an H x W x C array in [0, 1]."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    (w, h, maxval), pos = _pnm_tokens(raw, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    count = w * h * channels
    if magic in (b"P5", b"P6"):
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        body = raw[pos:pos + count * dtype.itemsize]
        if len(body) != count * dtype.itemsize:
            raise FormatError(f"{path}: truncated pixel data")
        values = np.frombuffer(body, dtype=dtype).astype(np.float64)
    else:
        toks, _ = _pnm_tokens(raw, count, pos)
        values = np.array([int(t) for t in toks], dtype=np.float64)
    return values.reshape(h, w, channels) / maxval


def write_ppm(path, image: np.ndarray) -> None:
    """Write an image as 8-bit binary P6 (3 channels) or P5 (1 channel)."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] not in (1, 3):
        raise FormatError("PNM output needs 1 or 3 channels")
    magic = b"P6" if img.shape[2] == 3 else b"P5"
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


# -- dataset manifests ------------------------------------------------------

def _encode_image(img: np.ndarray) -> dict:
    return {
        "shape": list(img.shape),
        "dtype": "<f8",
        "data": base64.b64encode(np.ascontiguousarray(img, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_image(obj: dict) -> np.ndarray:
    buf = base64.b64decode(obj["data"])
    return np.frombuffer(buf, dtype=obj.get("dtype", "<f8")).reshape(obj["shape"]).astype(np.float64)


def write_manifest(dataset: Dataset, path, image_dir=None) -> None:
    """JSON-lines manifest: a header record, then one record per sample.

    Images are stored inline (exact float64) unless ``image_dir`` is given, in
    which case each image is written as an 8-bit PPM and referenced by path.
    """
    path = Path(path)
    lines = [json.dumps({"dataset": dataset.name, "closure_tag": dataset.closure_tag, "count": len(dataset)})]
    for s in dataset.samples:
        rec = {"id": s.id, "branch": s.branch_label, "chain": s.chain_label}
        if image_dir is None:
            rec["image"] = _encode_image(s.image)
        else:
            image_dir = Path(image_dir)
            image_dir.mkdir(parents=True, exist_ok=True)
            img_path = image_dir / f"{s.id:06d}.ppm"
            write_ppm(img_path, s.image)
            rec["image_path"] = str(img_path.relative_to(path.parent)) if img_path.is_relative_to(path.parent) else str(img_path)
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Dataset:
    path = Path(path)
    try:
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not records or "dataset" not in records[0]:
        raise FormatError(f"{path}: missing header record")
    header, body = records[0], records[1:]
    samples = []
    for rec in body:
        if "image" in rec:
            img = _decode_image(rec["image"])
        elif "image_path" in rec:
            p = Path(rec["image_path"])
            p = p if p.is_absolute() else path.parent / p
            img = np.load(p) if p.suffix == ".npy" else read_pnm(p)
        else:
            raise FormatError(f"{path}: record {rec.get('id')} has no image")
        samples.append(Sample(rec["id"], img, rec.get("branch"), rec.get("chain")))
    if header.get("count", len(samples)) != len(samples):
        raise FormatError(f"{path}: header count {header['count']} != {len(samples)} records")
    return Dataset(tuple(samples), name=header["dataset"], closure_tag=header.get("closure_tag"))
