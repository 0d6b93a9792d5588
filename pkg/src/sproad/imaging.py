"""Image and label-map I/O, color conversions and dataset helpers.

Images are plain ``uint8`` numpy arrays of shape ``(H, W, 3)``.  Label maps
carry a per-pixel class (0 = non-road, 1 = road, 2 = unlabeled) and a
validity mask used by the evaluation code.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError, FormatError

NON_ROAD, ROAD, UNLABELED = 0, 1, 2

# native mask encoding
MASK_VALUES = {NON_ROAD: 0, ROAD: 255, UNLABELED: 128}

KITTI_ROAD = (255, 0, 255)
KITTI_NON_ROAD = (255, 0, 0)

# sRGB (D65) -> XYZ
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = _RGB2XYZ.sum(axis=1)


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) uint8 in {0, 1, 2}
    valid: np.ndarray  # (H, W) bool

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "LabelMap":
        labels = np.asarray(labels, dtype=np.uint8)
        return cls(labels, labels != UNLABELED)


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise DataError(f"expected uint8 image data, got {image.dtype}")
    return image


# ---------------------------------------------------------------------------
# netpbm


def _read_netpbm(data: bytes, path) -> tuple[str, np.ndarray, int]:
    """Parse a binary P5/P6 file; returns (magic, array, maxval)."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported netpbm magic {magic!r}")
    tokens = []
    pos = 2
    n = len(data)
    while len(tokens) < 3:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated netpbm header")
        tok = data[start:pos]
        if not tok.isdigit():
            raise FormatError(f"{path}: bad netpbm header field {tok!r}")
        tokens.append(int(tok))
    if pos >= n or not data[pos : pos + 1].isspace():
        raise FormatError(f"{path}: truncated netpbm header")
    pos += 1
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval not in (255, 65535):
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype(np.uint8)
    count = width * height * channels
    raster = data[pos : pos + count * dtype.itemsize]
    if len(raster) < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated raster ({len(raster)} of {count * dtype.itemsize} bytes)")
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    return magic.decode(), arr, maxval


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _netpbm_bytes(arr: np.ndarray) -> bytes:
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    magic = "P6" if c == 3 else "P5"
    if arr.dtype == np.uint16:
        header = f"{magic}\n{w} {h}\n65535\n".encode()
        return header + arr.astype(">u2").tobytes()
    header = f"{magic}\n{w} {h}\n255\n".encode()
    return header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def _png_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    if arr.ndim == 2 and arr.dtype == np.uint16:
        pil = PILImage.fromarray(arr.astype(np.uint16), mode="I;16")
    else:
        pil = PILImage.fromarray(arr)
    pil.save(buf, format="PNG")
    return buf.getvalue()


def write_raster(arr: np.ndarray, path) -> None:
    """Write a gray or RGB raster; format picked from the suffix (.png, .ppm, .pgm)."""
    suffix = Path(path).suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        payload = _netpbm_bytes(arr)
    elif suffix == ".png":
        payload = _png_bytes(arr)
    else:
        raise FormatError(f"{path}: unsupported output format {suffix!r}")
    _atomic_write(path, payload)


def read_raster(path) -> np.ndarray:
    """Read a raster as (H, W, C) with C in {1, 3}; uint8 or uint16."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        _, arr, maxval = _read_netpbm(data, path)
        return arr.astype(np.uint16) if maxval == 65535 else arr
    try:
        pil = PILImage.open(path)
        pil.load()
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from exc
    mode = pil.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return np.asarray(pil, dtype=np.uint16)[:, :, None]
    if mode == "1":
        raise FormatError(f"{path}: unsupported bit depth 1")
    if mode in ("L", "LA"):
        return np.asarray(pil.convert("L"), dtype=np.uint8)[:, :, None]
    if mode in ("RGB", "RGBA", "P", "PA"):
        return np.asarray(pil.convert("RGB"), dtype=np.uint8)
    raise FormatError(f"{path}: unsupported image mode {mode}")


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB image from PNG or binary PPM/PGM.

    Alpha is dropped and grayscale is replicated to three channels.
    """
    arr = read_raster(path)
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: unsupported bit depth 16 (8-bit required)")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.ascontiguousarray(arr)


def save_image(image: np.ndarray, path) -> None:
    write_raster(check_image(image), path)


# ---------------------------------------------------------------------------
# color spaces


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


_LINEAR = _srgb_to_linear(np.arange(256) / 255.0)


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """CIELAB (D65) of an 8-bit sRGB image, float64 (H, W, 3)."""
    # 8-bit input: the transfer curve is a 256-entry table
    rgb = _LINEAR[check_image(image)]
    xyz = rgb @ _RGB2XYZ.T / _D65_WHITE
    eps = 216.0 / 24389.0
    kappa = 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    # black comes out as exactly 0 only up to rounding of the linear branch
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    return lab


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """Hexcone HSV with every channel in [0, 1]; achromatic hue is 0."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.divide(delta, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        v == r,
        ((g - b) / safe) % 6.0,
        np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma on the 0-255 scale.

    Computed as an integer weighted sum first so that equal-luma pixels
    compare exactly equal.
    """
    img = np.asarray(image, dtype=np.int64)
    return (299 * img[..., 0] + 587 * img[..., 1] + 114 * img[..., 2]) / 1000.0


# ---------------------------------------------------------------------------
# label maps


def load_kitti_gt(path) -> LabelMap:
    """Decode a KITTI road ground-truth image (magenta road, red non-road)."""
    img = load_image(path)
    road = np.all(img == KITTI_ROAD, axis=-1)
    non_road = np.all(img == KITTI_NON_ROAD, axis=-1)
    labels = np.full(img.shape[:2], UNLABELED, dtype=np.uint8)
    labels[road] = ROAD
    labels[non_road] = NON_ROAD
    return LabelMap(labels, road | non_road)


def load_mask(path) -> LabelMap:
    """Read a native {0, 128, 255} grayscale mask."""
    arr = read_raster(path)
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: mask must be 8-bit")
    if arr.shape[2] == 3:
        if not (np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2])):
            raise FormatError(f"{path}: mask must be grayscale")
    gray = arr[..., 0]
    bad = ~np.isin(gray, (0, 128, 255))
    if bad.any():
        offending = sorted(set(np.unique(gray[bad]).tolist()))[:5]
        raise FormatError(f"{path}: invalid mask values {offending} (allowed 0, 128, 255)")
    labels = np.full(gray.shape, UNLABELED, dtype=np.uint8)
    labels[gray == 0] = NON_ROAD
    labels[gray == 255] = ROAD
    return LabelMap(labels, gray != 128)


def mask_to_gray(label_map: LabelMap) -> np.ndarray:
    gray = np.full(label_map.labels.shape, 128, dtype=np.uint8)
    gray[label_map.labels == NON_ROAD] = 0
    gray[label_map.labels == ROAD] = 255
    return gray


def save_mask(label_map: LabelMap, path) -> None:
    write_raster(mask_to_gray(label_map), path)


def save_probability(prob: np.ndarray, path) -> None:
    """Write a [0, 1] road-probability map as 16-bit gray (value / 65535)."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.size and (prob.min() < 0 or prob.max() > 1):
        raise DataError("probabilities must lie in [0, 1]")
    write_raster(np.rint(prob * 65535.0).astype(np.uint16), path)


def load_probability(path) -> np.ndarray:
    arr = read_raster(path)[..., 0]
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset

CATEGORIES = ("UM", "UMM", "UU")


def category_of(name) -> str:
    stem = Path(str(name)).name
    head = stem.split("_", 1)[0].upper()
    return head if head in CATEGORIES else ""


def split_dataset(files, fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic train/validation split, stratified by UM/UMM/UU prefix.

    Each category gets ``floor(n_c * fraction)`` validation files; the
    remainder up to ``round(n * fraction)`` goes to the largest categories.
    """
    files = list(files)
    if not files:
        raise DataError("cannot split an empty file list")
    if not 0.0 < fraction < 1.0:
        raise DataError(f"validation fraction must be in (0, 1), got {fraction}")
    groups: dict[str, list] = {}
    for f in sorted(files, key=str):
        groups.setdefault(category_of(f), []).append(f)

    counts = {k: int(np.floor(len(v) * fraction)) for k, v in groups.items()}
    target = int(np.floor(len(files) * fraction + 0.5))
    remainder = target - sum(counts.values())
    for k in sorted(groups, key=lambda k: (-len(groups[k]), k)):
        if remainder <= 0:
            break
        if counts[k] < len(groups[k]):
            counts[k] += 1
            remainder -= 1

    rng = np.random.default_rng(seed)
    train, val = [], []
    for k in sorted(groups):
        members = groups[k]
        order = rng.permutation(len(members))
        chosen = set(order[: counts[k]].tolist())
        for i, f in enumerate(members):
            (val if i in chosen else train).append(f)
    return train, val


def kitti_pairs(root) -> list[tuple[Path, Path]]:
    """Match ``image_2/*`` with ground truth in ``gt_image_2/``.

    Accepts the KITTI naming (``um_000000.png`` ->
    ``um_road_000000.png``) as well as identical stems.
    """
    root = Path(root)
    img_dir, gt_dir = root / "image_2", root / "gt_image_2"
    pairs = []
    gts = {p.stem: p for p in gt_dir.iterdir()} if gt_dir.is_dir() else {}
    for img in sorted(img_dir.iterdir()):
        if img.suffix.lower() not in (".png", ".ppm"):
            continue
        cat, _, idx = img.stem.partition("_")
        for cand in (img.stem, f"{cat}_road_{idx}", f"{cat}_lane_{idx}"):
            if cand in gts:
                pairs.append((img, gts[cand]))
                break
        else:
            pairs.append((img, None))
    return pairs
