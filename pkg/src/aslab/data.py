"""Dataset construction and binary file formats.

Three formats are spoken here:

* IDX (big-endian, the classic digit-corpus container) for raw images
  and labels;
* FMAP, a tiny little-endian float32 container for score-map stacks
  (magic ``FMAP`` | version u16 | dtype u8 | ndim u8 | dims u32 each |
  row-major payload);
* binary PGM (P5, maxval 255) for label masks, where the gray value is
  the class id (0 = background, 255 = ignore).

Segmentation samples are derived from 28x28 digit images: the image is
upsampled with nearest-neighbor to 64 or 128 per side, and the mask
labels every non-zero pixel with ``digit + 1`` (0 stays background).
"""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
FMAP_DTYPE_F32 = 0


# ----------------------------------------------------------------- IDX


def load_idx(path):
    """Read an IDX file. Image files (magic 0x00000803) come back as
    float32 in [0, 1], shape (N, H, W); label files (magic 0x00000801)
    as int64, shape (N,)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(
            f"{path}: bad IDX magic 0x{magic & 0xFFFFFFFF:08x} "
            f"(expected 0x{IDX_IMAGES_MAGIC:08x} for images or 0x{IDX_LABELS_MAGIC:08x} for labels)"
        )
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    if any(d < 0 for d in dims):
        raise FormatError(f"{path}: negative IDX dimension {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header != count:
        raise FormatError(
            f"{path}: IDX payload size mismatch: expected {count} bytes, got {len(raw) - header}"
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_IMAGES_MAGIC:
        return data.astype(np.float32) / np.float32(255)
    return data.astype(np.int64)


def write_idx_images(path, images):
    """Write uint8 images (N, H, W) in IDX format."""
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ShapeError(f"IDX images must be uint8 (N, H, W), got {images.dtype} {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"IDX labels must be 1-d, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ShapeError("IDX labels must fit in uint8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- FMAP


def _nan_index_message(arr):
    flat = np.isnan(arr).ravel() | np.isinf(arr).ravel()
    idx = int(np.argmax(flat))
    multi = np.unravel_index(idx, arr.shape)
    return f"non-finite value at flat index {idx}, position {tuple(int(m) for m in multi)}"


def write_fmap(path, arr):
    """Write a float32 array (any rank >= 1) as an FMAP file."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim < 1:
        raise ShapeError("FMAP arrays must have at least one dimension")
    if not np.isfinite(arr).all():
        raise NumericError(f"refusing to write {path}: {_nan_index_message(arr)}")
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<HBB", FMAP_VERSION, FMAP_DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_fmap(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated FMAP header ({len(raw)} bytes)")
    if raw[:4] != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FMAP_MAGIC!r}")
    version, dtype_code, ndim = struct.unpack("<HBB", raw[4:8])
    if version != FMAP_VERSION:
        raise FormatError(f"{path}: unsupported FMAP version {version}")
    if dtype_code != FMAP_DTYPE_F32:
        raise FormatError(f"{path}: unsupported FMAP dtype code {dtype_code}")
    if ndim < 1:
        raise FormatError(f"{path}: FMAP ndim must be >= 1, got {ndim}")
    header = 8 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated FMAP dimension block")
    dims = struct.unpack(f"<{ndim}I", raw[8:header])
    count = int(np.prod(dims, dtype=np.int64))
    expect = count * 4
    got = len(raw) - header
    if got != expect:
        raise FormatError(f"{path}: FMAP payload size mismatch: expected {expect} bytes, got {got}")
    arr = np.frombuffer(raw, dtype="<f4", offset=header).reshape(dims).astype(np.float32)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: {_nan_index_message(arr)}")
    return arr


# ----------------------------------------------------------------- PGM


def write_pgm(path, mask):
    """Write a uint8 2-d array as binary PGM (P5, maxval 255)."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise ShapeError(f"PGM masks must be uint8 (H, W), got {mask.dtype} {mask.shape}")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(mask.tobytes())


def _pgm_tokens(raw, path, n):
    """Yield the first n whitespace-separated header tokens, honoring
    '#' comments, and return them with the offset just past the token
    terminator."""
    tokens = []
    i = 0
    while len(tokens) < n:
        if i >= len(raw):
            raise FormatError(f"{path}: truncated PGM header")
        c = raw[i : i + 1]
        if c == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace() and raw[j : j + 1] != b"#":
                j += 1
            tokens.append(raw[i:j])
            i = j
    # exactly one whitespace byte terminates the header
    if i >= len(raw) or not raw[i : i + 1].isspace():
        raise FormatError(f"{path}: malformed PGM header terminator")
    return tokens, i + 1


def read_pgm(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 2:
        raise FormatError(f"{path}: not a PGM file")
    magic = raw[:2]
    if magic != b"P5":
        raise FormatError(f"{path}: PGM magic {magic!r} not supported, P5 required")
    tokens, offset = _pgm_tokens(raw, path, 4)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric PGM header fields {tokens[1:]}") from exc
    if maxval != 255:
        raise FormatError(f"{path}: PGM maxval {maxval} not supported, 255 required")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad PGM dimensions {w}x{h}")
    if len(raw) - offset != w * h:
        raise FormatError(
            f"{path}: PGM payload size mismatch: expected {w * h} bytes, got {len(raw) - offset}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(h, w).copy()


# -------------------------------------------------- segmentation corpus

IGNORE_LABEL = 255


@dataclass
class SegSample:
    """One weakly supervised segmentation sample: a (1, S, S) float32
    image in [0, 1], its (S, S) uint8 label mask, and the image-level
    class label (mask value = label + 1 on foreground)."""

    image: np.ndarray
    mask: np.ndarray
    label: int
    index: int = 0

    @property
    def side(self) -> int:
        return self.image.shape[1]

    @property
    def mask_id(self) -> int:
        """The class id this sample's foreground carries in masks."""
        return self.label + 1


def upsample_nearest(images: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbor upsample (N, h, w) -> (N, side, side) using the
    source index floor(i * h / side)."""
    if images.ndim != 3:
        raise ShapeError(f"expected (N, h, w) images, got {images.shape}")
    h, w = images.shape[1], images.shape[2]
    if side < h or side < w:
        raise ShapeError(f"side {side} smaller than source {h}x{w}")
    ri = (np.arange(side) * h) // side
    ci = (np.arange(side) * w) // side
    return images[:, ri][:, :, ci]


def build_seg_samples(images: np.ndarray, labels: np.ndarray, side: int) -> list[SegSample]:
    """Turn scaled digit images + labels into segmentation samples.

    The mask marks every non-zero upsampled pixel with ``label + 1``;
    zero stays background. Image values pass through unchanged.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.shape[0] != labels.shape[0]:
        raise ShapeError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    up = upsample_nearest(images, side)
    out = []
    for i in range(up.shape[0]):
        lab = int(labels[i])
        mask = np.where(up[i] > 0, np.uint8(lab + 1), np.uint8(0))
        out.append(SegSample(image=up[i][None].copy(), mask=mask, label=lab, index=i))
    return out


# --------------------------------------------- on-disk dataset directory


def save_dataset(dirpath, samples) -> None:
    """Materialize samples as image FMAPs + mask PGMs + an index.csv."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    with open(dirpath / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "image", "mask"])
        for s in samples:
            img_name = f"image_{s.index:05d}.fmap"
            mask_name = f"mask_{s.index:05d}.pgm"
            write_fmap(dirpath / img_name, s.image)
            write_pgm(dirpath / mask_name, s.mask)
            writer.writerow([s.index, s.label, img_name, mask_name])


def load_dataset(dirpath, ids=None) -> list[SegSample]:
    """Read back a dataset directory written by :func:`save_dataset`."""
    dirpath = Path(dirpath)
    index = dirpath / "index.csv"
    if not index.exists():
        raise FormatError(f"{dirpath}: no index.csv; not a dataset directory")
    wanted = None if ids is None else {int(i) for i in ids}
    out = []
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            idx = int(row["id"])
            if wanted is not None and idx not in wanted:
                continue
            image = read_fmap(dirpath / row["image"])
            if image.ndim != 3:
                raise FormatError(f"{row['image']}: expected (C, H, W) image, got {image.shape}")
            mask = read_pgm(dirpath / row["mask"])
            if mask.shape != image.shape[1:]:
                raise ShapeError(
                    f"sample {idx}: mask {mask.shape} does not match image {image.shape[1:]}"
                )
            out.append(SegSample(image=image, mask=mask, label=int(row["label"]), index=idx))
    if wanted is not None and len(out) != len(wanted):
        got = {s.index for s in out}
        raise FormatError(f"{dirpath}: missing sample ids {sorted(wanted - got)}")
    return out
