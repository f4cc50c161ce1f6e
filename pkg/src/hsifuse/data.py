"""Scene I/O, normalization, patch extraction, splits and synthetic scenes.

A scene is a directory of MDT tensor containers plus a meta.json:

    hsi.mdt     float32  [H, W, C1]   reflectance bands
    lidar.mdt   float32  [H, W, C2]   elevation channels
    labels.mdt  uint16   [H, W]       0 = unlabeled, 1..K = classes
    meta.json   {"name", "num_classes", "class_names": [...]}

The MDT container is bit-exact: magic "MDT1", one dtype-code byte
(1 = f32 LE, 2 = u16 LE), one rank byte, rank little-endian u64 dims,
then the row-major payload.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MDT_MAGIC = b"MDT1"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<u2")}
_CODE_FOR_DTYPE = {np.dtype("<f4"): 1, np.dtype("<u2"): 2}


class SceneError(Exception):
    """Base for scene/container problems."""


class BadMagicError(SceneError):
    pass


class BadDtypeError(SceneError):
    pass


class TruncatedFileError(SceneError):
    pass


class ShapeMismatchError(SceneError):
    pass


class LabelRangeError(SceneError):
    pass


# ---------------------------------------------------------------------------
# MDT container
# ---------------------------------------------------------------------------


def write_mdt(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype == np.uint16:
        arr = arr.astype("<u2", copy=False)
    code = _CODE_FOR_DTYPE.get(arr.dtype)
    if code is None:
        raise BadDtypeError(f"MDT stores f32 or u16, not {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(MDT_MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def peek_mdt(path) -> tuple[np.dtype, tuple[int, ...]]:
    """Read only the header: (dtype, shape). Validates magic and dtype code."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MDT_MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        head = fh.read(2)
        if len(head) < 2:
            raise TruncatedFileError(f"{path}: truncated header")
        code, rank = struct.unpack("<BB", head)
        if code not in _DTYPE_CODES:
            raise BadDtypeError(f"{path}: unknown dtype code {code}")
        dims_raw = fh.read(8 * rank)
        if len(dims_raw) < 8 * rank:
            raise TruncatedFileError(f"{path}: truncated dimension list")
        shape = struct.unpack(f"<{rank}Q", dims_raw)
    return _DTYPE_CODES[code], tuple(int(d) for d in shape)


def read_mdt(path) -> np.ndarray:
    dtype, shape = peek_mdt(path)
    header = 4 + 2 + 8 * len(shape)
    expected = int(np.prod(shape)) * dtype.itemsize
    with open(path, "rb") as fh:
        fh.seek(header)
        payload = fh.read()
    if len(payload) != expected:
        raise TruncatedFileError(f"{path}: payload {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    hsi: np.ndarray      # [H, W, C1] float32
    lidar: np.ndarray    # [H, W, C2] float32
    labels: np.ndarray   # [H, W] uint16, 0 = unlabeled
    name: str
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.hsi.shape[0]

    @property
    def width(self) -> int:
        return self.hsi.shape[1]

    def validate(self) -> None:
        h, w = self.labels.shape
        if self.hsi.shape[:2] != (h, w) or self.lidar.shape[:2] != (h, w):
            raise ShapeMismatchError(
                f"rasters disagree: hsi {self.hsi.shape}, lidar {self.lidar.shape}, labels {self.labels.shape}"
            )
        top = int(self.labels.max()) if self.labels.size else 0
        if top > self.num_classes:
            raise LabelRangeError(f"label {top} out of range for {self.num_classes} classes")
        if self.num_classes < 2:
            raise SceneError(f"need at least 2 classes, got {self.num_classes}")


def validate_scene_shapes(hsi_shape, lidar_shape, labels_shape) -> None:
    """Shape compatibility contract shared by loaders and converters."""
    if len(hsi_shape) != 3 or len(lidar_shape) != 3 or len(labels_shape) != 2:
        raise ShapeMismatchError(f"bad ranks: hsi {hsi_shape}, lidar {lidar_shape}, labels {labels_shape}")
    if hsi_shape[:2] != lidar_shape[:2] or hsi_shape[:2] != tuple(labels_shape):
        raise ShapeMismatchError(f"spatial dims differ: hsi {hsi_shape}, lidar {lidar_shape}, labels {labels_shape}")


def load_scene(dir_path) -> Scene:
    d = Path(dir_path)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(meta_path)
    meta = json.loads(meta_path.read_text())
    for key in ("name", "num_classes", "class_names"):
        if key not in meta:
            raise SceneError(f"meta.json is missing key {key!r}")
    hsi = read_mdt(d / "hsi.mdt")
    lidar = read_mdt(d / "lidar.mdt")
    labels = read_mdt(d / "labels.mdt")
    validate_scene_shapes(hsi.shape, lidar.shape, labels.shape)
    scene = Scene(
        hsi=hsi.astype(np.float32, copy=False),
        lidar=lidar.astype(np.float32, copy=False),
        labels=labels.astype(np.uint16, copy=False),
        name=str(meta["name"]),
        num_classes=int(meta["num_classes"]),
        class_names=list(meta["class_names"]),
    )
    scene.validate()
    return scene


def save_scene(scene: Scene, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    write_mdt(d / "hsi.mdt", scene.hsi.astype(np.float32))
    write_mdt(d / "lidar.mdt", scene.lidar.astype(np.float32))
    write_mdt(d / "labels.mdt", scene.labels.astype(np.uint16))
    meta = {"name": scene.name, "num_classes": scene.num_classes, "class_names": scene.class_names}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def normalize_bands(scene: Scene) -> Scene:
    """Min-max scale every band of both modalities into [0,1]; constant bands map to 0."""
    def norm(cube):
        if not np.all(np.isfinite(cube)):
            raise SceneError("non-finite values in raster")
        lo = cube.min(axis=(0, 1), keepdims=True)
        hi = cube.max(axis=(0, 1), keepdims=True)
        span = hi - lo
        span[span == 0] = 1.0
        return ((cube - lo) / span).astype(np.float32)

    return Scene(
        hsi=norm(scene.hsi),
        lidar=norm(scene.lidar),
        labels=scene.labels,
        name=scene.name,
        num_classes=scene.num_classes,
        class_names=scene.class_names,
    )


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


@dataclass
class PatchBatch:
    patches1: np.ndarray      # [B, P, P, C1]
    patches2: np.ndarray      # [B, P, P, C2]
    labels: np.ndarray        # [B] int, 1..K
    pixel_coords: np.ndarray  # [B, 2] (row, col)


def extract_patches(scene: Scene, coords, patch: int = 7) -> PatchBatch:
    """Cut patch x patch neighborhoods centered on ``coords`` with mirror padding.

    Mirror convention: reflection without repeating the edge row/column
    (index -1 maps to 1), so border patches never fabricate values outside
    the per-band range of the scene.
    """
    if patch % 2 == 0:
        raise ValueError(f"patch size must be odd, got {patch}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    half = patch // 2
    labels = scene.labels[coords[:, 0], coords[:, 1]]
    if np.any(labels == 0):
        bad = coords[labels == 0][0]
        raise ValueError(f"pixel {tuple(bad)} is unlabeled (label 0)")

    def cut(cube):
        padded = np.pad(cube, ((half, half), (half, half), (0, 0)), mode="reflect")
        out = np.empty((len(coords), patch, patch, cube.shape[2]), dtype=cube.dtype)
        for i, (r, c) in enumerate(coords):
            out[i] = padded[r:r + patch, c:c + patch]
        return out

    return PatchBatch(
        patches1=cut(scene.hsi),
        patches2=cut(scene.lidar),
        labels=labels.astype(np.int64),
        pixel_coords=coords,
    )


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class SplitIndex:
    train_coords: np.ndarray  # [N, 2]
    test_coords: np.ndarray   # [M, 2]
    seed: int


def split_samples(scene: Scene, train_fraction: float, seed: int) -> SplitIndex:
    """Stratified split: per class, floor(fraction * n_k) pixels (min 1) train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0,1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in range(1, scene.num_classes + 1):
        rows, cols = np.nonzero(scene.labels == k)
        if len(rows) == 0:
            continue
        order = rng.permutation(len(rows))
        coords = np.stack([rows, cols], axis=1)[order]
        n_train = max(1, int(np.floor(train_fraction * len(coords))))
        if len(coords) == 1:
            warnings.warn(f"class {k} has a single labeled pixel; assigning it to train")
        train.append(coords[:n_train])
        test.append(coords[n_train:])
    return SplitIndex(
        train_coords=np.concatenate(train) if train else np.empty((0, 2), np.int64),
        test_coords=np.concatenate(test) if test else np.empty((0, 2), np.int64),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    height: int = 64
    width: int = 64
    c1: int = 8
    c2: int = 1
    num_classes: int = 3
    texture_scale: float = 0.5
    noise_sigma: float = 0.05


def _smooth_field(rng, h, w, radius: int) -> np.ndarray:
    """Band-limited noise: white noise blurred by repeated box filters."""
    f = rng.standard_normal((h, w))
    r = max(1, radius)
    kernel = np.ones(2 * r + 1) / (2 * r + 1)
    for _ in range(3):
        f = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), 0, f)
        f = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), 1, f)
    s = f.std()
    return f / s if s > 0 else f


def synth_scene(spec: SynthSpec, seed: int) -> Scene:
    """Voronoi class regions with distinct spectral signatures per class.

    Each class gets a random C1-vector signature (rejection-sampled for
    pairwise separation), shared smooth texture correlated across bands, a
    per-class base elevation, and i.i.d. Gaussian noise of ``noise_sigma``.
    Fully deterministic per seed.
    """
    h, w, k = spec.height, spec.width, spec.num_classes
    if h < 1 or w < 1 or spec.c1 < 1 or spec.c2 < 1 or k < 2:
        raise ValueError(f"degenerate synth spec: {spec}")
    if k > h * w:
        raise ValueError(f"{k} classes cannot fit {h * w} pixels")
    rng = np.random.default_rng(seed)

    flat_sites = rng.choice(h * w, size=k, replace=False)
    sites = np.stack([flat_sites // w, flat_sites % w], axis=1)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    labels = (np.argmin(d2, axis=-1) + 1).astype(np.uint16)

    min_dist = 0.25 * np.sqrt(spec.c1)
    signatures = []
    for _ in range(k):
        for _attempt in range(200):
            cand = rng.uniform(0.15, 0.85, spec.c1)
            if all(np.linalg.norm(cand - s) >= min_dist for s in signatures):
                break
        signatures.append(cand)
    signatures = np.asarray(signatures)

    hsi = signatures[labels - 1].astype(np.float64)
    texture = _smooth_field(rng, h, w, radius=max(1, min(h, w) // 16))
    band_corr = rng.uniform(0.5, 1.0, spec.c1)
    hsi += spec.texture_scale * 0.1 * texture[..., None] * band_corr
    hsi += rng.normal(0.0, spec.noise_sigma, hsi.shape) if spec.noise_sigma > 0 else 0.0

    base_heights = rng.uniform(0.0, 1.0, (k, spec.c2))
    lidar = base_heights[labels - 1].astype(np.float64)
    if spec.texture_scale > 0:
        for c in range(spec.c2):
            lidar[..., c] += spec.texture_scale * 0.05 * _smooth_field(rng, h, w, radius=max(1, min(h, w) // 8))
    lidar += rng.normal(0.0, spec.noise_sigma, lidar.shape) if spec.noise_sigma > 0 else 0.0

    scene = Scene(
        hsi=hsi.astype(np.float32),
        lidar=lidar.astype(np.float32),
        labels=labels,
        name=f"synth-{seed}",
        num_classes=k,
        class_names=[f"class_{i}" for i in range(1, k + 1)],
    )
    scene.validate()
    return scene
