"""
Image/mask loading, resizing, augmentation, splitting and batching.

Images are decoded with Pillow, converted to single-channel float32 in
[0, 1] by dividing by the bit-depth maximum (RGB is averaged over channels).
Masks become strict {0, 1} float32 arrays. Every random decision is drawn
from a generator seeded by ``(seed, epoch, sample index)``, so results never
depend on the order or thread in which samples are processed.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DimensionMismatchError, EmptyDatasetError, InvalidGeometryError, UnsupportedFormatError
from .layers import bilinear_matrix

ROTATION_MODES = ("none", "quarter", "small")


@dataclass
class SamplePair:
    image: np.ndarray
    mask: np.ndarray
    image_path: Optional[str] = None
    mask_path: Optional[str] = None

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DimensionMismatchError(f"image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass(frozen=True)
class AugmentPolicy:
    hflip_prob: float = 0.5
    rotation: str = "quarter"
    max_angle: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        if self.rotation not in ROTATION_MODES:
            raise ValueError(f"rotation must be one of {ROTATION_MODES}, got {self.rotation!r}")


@dataclass
class DatasetSplit:
    train: list
    val: list
    split_seed: Optional[int] = None


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------

def read_gray(path) -> tuple[np.ndarray, float]:
    """Decode ``path`` to a 2-D array plus the maximum value of its bit depth."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "I;16", "I;16L", "I;16B", "I"):
                arr = np.asarray(im)
            elif mode in ("1", "P", "RGB", "RGBA", "LA", "CMYK", "YCbCr"):
                if mode == "1":
                    arr = np.asarray(im.convert("L"))
                elif mode == "LA":
                    arr = np.asarray(im)[..., 0]
                else:
                    arr = np.asarray(im.convert("RGB"))
            else:
                raise UnsupportedFormatError(f"{path}: unsupported image mode {mode!r}")
    except UnidentifiedImageError:
        raise UnsupportedFormatError(f"{path}: not a decodable image") from None
    if arr.dtype == np.uint8:
        max_value = 255.0
    elif arr.dtype in (np.uint16, np.dtype(">u2"), np.int32) or mode.startswith("I"):
        max_value = 65535.0
    else:
        raise UnsupportedFormatError(f"{path}: unsupported sample type {arr.dtype}")
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr, max_value


def load_image(path) -> np.ndarray:
    arr, max_value = read_gray(path)
    return np.clip(arr / max_value, 0.0, 1.0).astype(np.float32)


def load_mask(path, threshold: float = 0.5) -> np.ndarray:
    """Binarize a mask file.

    8-bit masks: pixel > threshold * 255. 16-bit masks are treated as
    instance label images (as in cell-tracking ground truth), so every
    non-zero label becomes foreground.
    """
    arr, max_value = read_gray(path)
    if max_value > 255:
        return (arr > 0).astype(np.float32)
    return (arr > threshold * max_value).astype(np.float32)


def load_sample(image_path, mask_path, threshold: float = 0.5) -> SamplePair:
    image = load_image(image_path)
    mask = load_mask(mask_path, threshold)
    if image.shape != mask.shape:
        raise DimensionMismatchError(f"{image_path} is {image.shape} but {mask_path} is {mask.shape}")
    return SamplePair(image, mask, str(image_path), str(mask_path))


def save_mask_png(mask: np.ndarray, path) -> None:
    """Write a binary mask as an 8-bit PNG with values {0, 255}."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    out = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(out, mode="L").save(path, format="PNG")


def save_image_png(image: np.ndarray, path) -> None:
    """Write a [0, 1] float image as an 8-bit grayscale PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    out = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(out, mode="L").save(path, format="PNG")


# --------------------------------------------------------------------------
# dataset discovery
# --------------------------------------------------------------------------

def read_manifest(path) -> list[tuple[str, str]]:
    """Parse ``image<TAB>mask`` lines; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), 1):
        line = line.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise UnsupportedFormatError(f"{path}:{lineno}: expected 'image<TAB>mask'")
        pairs.append(tuple(str(base / p) if not Path(p).is_absolute() else p for p in parts))
    return pairs


def write_manifest(pairs: Iterable[tuple[str, str]], path) -> None:
    lines = [f"{img}\t{msk}\n" for img, msk in pairs]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def scan_pairs(data_dir) -> list[tuple[str, str]]:
    """Pair ``images/NAME`` with ``masks/NAME`` under ``data_dir``."""
    data_dir = Path(data_dir)
    img_dir, mask_dir = data_dir / "images", data_dir / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{data_dir} must contain images/ and masks/ directories")
    pairs = []
    for img in sorted(p for p in img_dir.iterdir() if p.is_file()):
        msk = mask_dir / img.name
        if not msk.exists():
            raise FileNotFoundError(f"no mask for {img.name} in {mask_dir}")
        pairs.append((str(img), str(msk)))
    return pairs


def load_pairs(pairs: Sequence[tuple[str, str]], threshold: float = 0.5) -> list[SamplePair]:
    return [load_sample(i, m, threshold) for i, m in pairs]


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize (half-pixel centres), same convention as the network layer."""
    if height < 1 or width < 1:
        raise InvalidGeometryError(f"resize target {height}x{width}")
    h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    ry = bilinear_matrix(h, height)
    rx = bilinear_matrix(w, width)
    return (ry @ image.astype(np.float64) @ rx.T).astype(image.dtype)


def nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    idx = np.floor((np.arange(out_size) + 0.5) * (in_size / out_size)).astype(np.int64)
    return np.minimum(idx, in_size - 1)


def resize_nearest(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    if height < 1 or width < 1:
        raise InvalidGeometryError(f"resize target {height}x{width}")
    h, w = arr.shape
    return arr[np.ix_(nearest_indices(h, height), nearest_indices(w, width))]


def resize_pair(s: SamplePair, size: int) -> SamplePair:
    """Resize to size x size: bilinear for the image, nearest-neighbour for the mask."""
    return SamplePair(resize_image(s.image, size, size), resize_nearest(s.mask, size, size),
                      s.image_path, s.mask_path)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

def augment(s: SamplePair, policy: AugmentPolicy, rng: np.random.Generator) -> SamplePair:
    """Apply one random horizontal flip / rotation identically to image and mask."""
    image, mask = s.image, s.mask
    if rng.random() < policy.hflip_prob:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if policy.rotation == "quarter":
        k = int(rng.integers(0, 4))
        image, mask = np.rot90(image, k), np.rot90(mask, k)
    elif policy.rotation == "small":
        angle = float(rng.uniform(-policy.max_angle, policy.max_angle))
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
        mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0.0)
        image = np.clip(image, 0.0, 1.0)
        mask = (mask > 0.5).astype(np.float32)
    return SamplePair(np.ascontiguousarray(image), np.ascontiguousarray(mask), s.image_path, s.mask_path)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


# --------------------------------------------------------------------------
# splitting and batching
# --------------------------------------------------------------------------

def split_dataset(samples: Sequence, val_fraction: float, seed: int) -> DatasetSplit:
    """Random disjoint train/val split; both parts keep the input order."""
    n = len(samples)
    if n == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = min(max(1, int(round(n * val_fraction))), n - 1)
    if n_val < 1:
        raise EmptyDatasetError(f"{n} sample(s) is too few to split")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return DatasetSplit(train, val, seed)


def stack_pairs(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([p.image for p in pairs])[:, None].astype(np.float32)
    masks = np.stack([p.mask for p in pairs])[:, None].astype(np.float32)
    return images, masks


def make_batches(samples: Sequence[SamplePair], batch_size: int, shuffle_seed: int, epoch: int,
                 policy: Optional[AugmentPolicy] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, masks) batches of shape (N, 1, H, W); the last partial batch is kept."""
    if not samples:
        raise EmptyDatasetError("no training samples")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = []
        for idx in order[start:start + batch_size]:
            s = samples[int(idx)]
            if policy is not None:
                s = augment(s, policy, sample_rng(policy.seed, epoch, int(idx)))
            chunk.append(s)
        yield stack_pairs(chunk)


def prefetch(iterable: Iterable, capacity: int = 2) -> Iterator:
    """Produce items of ``iterable`` on a background thread, at most ``capacity`` ahead."""
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for item in iterable:
                if stop.is_set():
                    return
                q.put(("item", item))
        except BaseException as exc:  # re-raised in the consumer
            q.put(("error", exc))
            return
        q.put(("item", done))

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    try:
        while True:
            kind, item = q.get()
            if kind == "error":
                raise item
            if item is done:
                return
            yield item
    finally:
        stop.set()
        while thread.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                thread.join(timeout=0.01)
