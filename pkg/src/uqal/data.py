"""Synthetic datasets: Gaussian blobs, two moons, OOD mixtures, shape segmentation; IDX loader."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DEFAULT_N_IID = 600
DEFAULT_N_OOD = 900


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0 or len(self.inputs) != len(self.labels):
            raise DataError("dataset needs N > 0 inputs with one label each")
        if self.inputs.min() < 0.0 or self.inputs.max() > 1.0:
            raise DataError("inputs must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, split or self.split, dict(self.meta))


@dataclass
class SegDataset:
    images: np.ndarray
    masks: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.masks.shape[0] or self.images.shape[2:] != self.masks.shape[1:]:
            raise DataError("label maps must match image spatial shape")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "SegDataset":
        idx = np.asarray(idx)
        return SegDataset(self.images[idx], self.masks[idx], self.num_classes, dict(self.meta))


@dataclass
class OodMixture:
    """IID samples followed by OOD samples. OOD labels are -1."""

    inputs: np.ndarray
    labels: np.ndarray
    is_ood: np.ndarray
    num_classes: int

    @property
    def n_iid(self) -> int:
        return int(np.sum(~self.is_ood))

    @property
    def n_ood(self) -> int:
        return int(np.sum(self.is_ood))

    def __len__(self) -> int:
        return len(self.inputs)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple:
    perm = RngStream.derive(seed, "split").permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return ds.subset(train_idx, "train"), ds.subset(test_idx, "test")


# ---------------------------------------------------------------------------
# blobs


@dataclass(frozen=True)
class BlobGeometry:
    """Regular-simplex class centres in ``dim`` dimensions and the affine map into [0, 1].

    ``separation`` is the distance from every centre to the simplex centroid.
    """

    num_classes: int
    dim: int
    separation: float
    noise: float
    seed: int

    def __post_init__(self):
        if self.num_classes < 2 or self.separation <= 0 or self.noise < 0:
            raise DataError("need num_classes >= 2, separation > 0, noise >= 0")
        if self.dim < self.num_classes - 1:
            raise DataError(f"a {self.num_classes}-class simplex needs dim >= {self.num_classes - 1}")

    def centers(self) -> np.ndarray:
        L = self.num_classes
        verts = np.eye(L) - 1.0 / L
        # orthonormal coordinates for the (L-1)-dim hull of the centred basis vectors
        u, _, _ = np.linalg.svd(verts.T)
        coords = verts @ u[:, : L - 1]
        coords *= self.separation / np.linalg.norm(coords[0])
        rng = RngStream.derive(self.seed, "blob-basis")
        q, _ = np.linalg.qr(rng.normal((self.dim, self.dim)))
        return coords @ q[:, : L - 1].T

    def half_range(self, extra_noise: float = 0.0) -> float:
        return float(np.abs(self.centers()).max() * 1.05 + 5.0 * max(self.noise, extra_noise) + 1e-12)

    def to_unit(self, z: np.ndarray) -> np.ndarray:
        r = self.half_range()
        return np.clip((z + r) / (2.0 * r), 0.0, 1.0)


def gen_blobs(num_classes: int, n_per_class: int, dim: int, separation: float, noise: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters at the vertices of a scaled simplex, mapped into [0, 1]^dim."""
    if n_per_class < 1:
        raise DataError("n_per_class must be positive")
    geo = BlobGeometry(num_classes, dim, separation, noise, seed)
    centers = geo.centers()
    rng = RngStream.derive(seed, "blob-samples")
    labels = np.repeat(np.arange(num_classes), n_per_class)
    z = centers[labels] + rng.normal((len(labels), dim), noise if noise > 0 else 1.0) * (noise > 0)
    meta = {"kind": "blobs", "num_classes": num_classes, "n_per_class": n_per_class, "dim": dim,
            "separation": separation, "noise": noise, "seed": seed}
    return Dataset(geo.to_unit(z), labels, num_classes, "all", meta)


def gen_moons(n: int, noise: float, seed: int) -> Dataset:
    """Two interleaved half circles, scaled isotropically into [0, 1]^2."""
    if n < 2 or noise < 0:
        raise DataError("need n >= 2 and noise >= 0")
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0, np.pi, n_out)
    t_in = np.linspace(0, np.pi, n_in)
    pts = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
        np.stack([1 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1),
    ])
    labels = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    if noise > 0:
        pts = pts + RngStream.derive(seed, "moons").normal(pts.shape, noise)
    origin, scale = moons_affine(noise)
    x = np.clip((pts - origin) / scale, 0.0, 1.0)
    return Dataset(x, labels, 2, "all", {"kind": "moons", "n": n, "noise": noise, "seed": seed})


def moons_affine(noise: float) -> tuple:
    """``(origin, scale)`` with unit coordinates = (raw - origin) / scale."""
    pad = 0.1 + 4.0 * noise
    scale = 3.0 + 2.0 * pad
    # x in [-1, 2], y in [-0.5, 1]; centre y inside the square
    origin = np.array([-1.0 - pad, 0.25 - scale / 2.0])
    return origin, scale


# ---------------------------------------------------------------------------
# OOD


def ood_params(meta: dict, noise_scale: float = 1.2) -> dict:
    """OOD generator: one cluster at the simplex centroid with wider noise."""
    return {"center": "centroid", "noise": meta["noise"] * noise_scale}


def check_ood_disjoint(geo: BlobGeometry, ood_noise: float) -> float:
    """Distance from the OOD centre to the nearest class centre over the combined noise scale."""
    combined = math.sqrt(geo.noise ** 2 + ood_noise ** 2)
    dist = float(np.linalg.norm(geo.centers(), axis=1).min())
    if combined > 0 and dist <= 3.0 * combined:
        raise DataError(f"OOD centre {dist:.3g} from IID centres is within 3x combined sigma {combined:.3g}")
    return dist / combined if combined > 0 else math.inf


def gen_ood_blobs(meta: dict, n: int, seed: int, noise_scale: float = 1.2) -> np.ndarray:
    geo = BlobGeometry(meta["num_classes"], meta["dim"], meta["separation"], meta["noise"], meta["seed"])
    ood_noise = geo.noise * noise_scale
    check_ood_disjoint(geo, ood_noise)
    z = RngStream.derive(seed, "ood-samples").normal((n, geo.dim), ood_noise if ood_noise > 0 else 1.0)
    return geo.to_unit(z * (ood_noise > 0))


def build_ood_mixture(iid: Dataset, n_iid: int = DEFAULT_N_IID, n_ood: int = DEFAULT_N_OOD,
                      seed: int = 0, noise_scale: float = 1.2) -> OodMixture:
    if n_iid > len(iid) or n_iid < 0 or n_ood < 0:
        raise DataError(f"requested {n_iid} IID samples but only {len(iid)} available")
    if iid.meta.get("kind") != "blobs" and n_ood > 0:
        raise DataError("OOD generation needs a blobs dataset")
    pick = np.sort(RngStream.derive(seed, "mixture-iid").permutation(len(iid))[:n_iid])
    parts = [iid.inputs[pick]]
    if n_ood:
        parts.append(gen_ood_blobs(iid.meta, n_ood, seed, noise_scale))
    inputs = np.concatenate(parts, axis=0)
    labels = np.concatenate([iid.labels[pick], -np.ones(n_ood, dtype=np.int64)])
    is_ood = np.concatenate([np.zeros(n_iid, bool), np.ones(n_ood, bool)])
    return OodMixture(inputs, labels, is_ood, iid.num_classes)


# ---------------------------------------------------------------------------
# segmentation


def gen_seg_shapes(n: int, height: int = 16, width: int = 16, num_classes: int = 3, seed: int = 0,
                   channels: int = 3, contrast: float = 0.5, noise: float = 0.02,
                   shapes_per_image: tuple = (1, 2), background: float = 0.5) -> SegDataset:
    """Background (class 0) with filled circles (class 1) and rectangles (class 2).

    A shape of class ``k`` raises channel ``(k - 1) % channels`` by
    ``contrast``. Shapes cover well under half the image so background is
    always the modal class.
    """
    if height < 16 or width < 16:
        raise DataError("images must be at least 16x16")
    if num_classes != 3:
        raise DataError("shape generator emits exactly 3 classes")
    rng = RngStream.derive(seed, "seg-shapes")
    images = np.full((n, channels, height, width), background)
    masks = np.zeros((n, height, width), dtype=np.int64)
    yy, xx = np.mgrid[0:height, 0:width]
    lo, hi = shapes_per_image
    for i in range(n):
        k = int(rng.integers(lo, hi + 1))
        for _ in range(k):
            cls = int(rng.integers(1, 3))
            if cls == 1:
                r = rng.uniform(2.0, min(height, width) / 5.0, None)
                cy = rng.uniform(r, height - r, None)
                cx = rng.uniform(r, width - r, None)
                region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            else:
                h = int(rng.integers(3, height // 3 + 1))
                w = int(rng.integers(3, width // 3 + 1))
                y0 = int(rng.integers(0, height - h + 1))
                x0 = int(rng.integers(0, width - w + 1))
                region = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
            masks[i][region] = cls
        for cls in (1, 2):
            images[i, (cls - 1) % channels][masks[i] == cls] += contrast
        if np.sum(masks[i] == 0) * 2 <= height * width:
            raise DataError("background is not the modal class")  # cannot happen with the size limits above
    if noise > 0:
        images = images + rng.normal(images.shape, noise)
    images = np.clip(images, 0.0, 1.0)
    meta = {"kind": "seg-shapes", "n": n, "height": height, "width": width, "seed": seed,
            "channels": channels, "contrast": contrast, "noise": noise}
    return SegDataset(images, masks, num_classes, meta)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, magic: int, ndim: int):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout). Pixels become ``N×1×rows×cols`` in [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    x = images.astype(np.float64)[:, None] / 255.0
    y = labels.astype(np.int64)
    L = num_classes if num_classes is not None else max(2, int(y.max()) + 1)
    return Dataset(x, y, L, "all", {"kind": "idx", "images": str(images_path), "labels": str(labels_path)})


# ---------------------------------------------------------------------------
# text dumps


def save_dataset(ds: Dataset, path) -> None:
    """One metadata header line, then ``label,x_0,...,x_{d-1}`` per sample."""
    header = {"meta": ds.meta, "num_classes": ds.num_classes, "split": ds.split,
              "input_shape": list(ds.inputs.shape[1:])}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for y, x in zip(ds.labels, ds.inputs.reshape(len(ds), -1)):
            fh.write(",".join([str(int(y))] + [repr(float(v)) for v in x]) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise DataError(f"{path}: missing metadata header")
        header = json.loads(first[2:])
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    labels = np.array([int(r[0]) for r in rows])
    inputs = np.array([[float(v) for v in r[1:]] for r in rows]).reshape([len(rows)] + header["input_shape"])
    return Dataset(inputs, labels, header["num_classes"], header["split"], header["meta"])
