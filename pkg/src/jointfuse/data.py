"""Paired infrared/visible loading, colour conversion and batching.

The network fuses the visible luminance with the infrared channel; the
visible chroma is carried alongside and re-attached for display.
"""
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import AnnotationParseError, FormatError, ValidationError

IMAGE_SUFFIXES = (".png", ".bmp")

# BT.601 full range, as used by JPEG.
_RGB2YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735891647856, -0.331264108352144, 0.5],
    [0.5, -0.418687589158345, -0.081312410841655],
])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


@dataclass
class ImagePair:
    infrared: np.ndarray  # (p, q) float64 in [0, 1]
    visible: np.ndarray   # (p, q, 3) float64 in [0, 1]
    id: str = ""

    def __post_init__(self):
        if self.infrared.ndim != 2:
            raise ValidationError(f"infrared must be 2-D, got shape {self.infrared.shape}")
        if self.visible.ndim != 3 or self.visible.shape[2] != 3:
            raise ValidationError(f"visible must be p x q x 3, got shape {self.visible.shape}")
        if self.infrared.shape != self.visible.shape[:2]:
            raise ValidationError(
                f"{self.id}: infrared {self.infrared.shape} and visible "
                f"{self.visible.shape[:2]} spatial shapes differ")
        for name, arr in (("infrared", self.infrared), ("visible", self.visible)):
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise ValidationError(f"{self.id}: {name} values must lie in [0, 1]")

    @property
    def shape(self):
        return self.infrared.shape


@dataclass
class Box:
    cls: int
    xyxy: tuple


@dataclass
class AnnotationSet:
    boxes: list
    mask: np.ndarray  # (p, q) int64 class indices
    class_count: int

    def __post_init__(self):
        for b in self.boxes:
            if not 0 <= b.cls < self.class_count:
                raise ValidationError(f"box class {b.cls} outside [0, {self.class_count})")
            x0, y0, x1, y1 = b.xyxy
            if not (x0 < x1 and y0 < y1):
                raise ValidationError(f"degenerate box {b.xyxy}")
            if min(b.xyxy) < 0.0 or max(b.xyxy) > 1.0:
                raise ValidationError(f"box {b.xyxy} not in normalized [0, 1] coordinates")
        if self.mask.ndim != 2:
            raise ValidationError("mask must be 2-D")
        if self.mask.size and (self.mask.min() < 0 or self.mask.max() >= self.class_count):
            raise ValidationError(
                f"mask index {int(self.mask.max())} outside [0, {self.class_count})")

    @property
    def classes(self):
        return np.array([b.cls for b in self.boxes], dtype=np.int64)

    @property
    def targets(self):
        return np.array([b.xyxy for b in self.boxes], dtype=np.float64).reshape(-1, 4)


# ---------------------------------------------------------------------------
# image io

def _decode(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode in ("1", "I", "I;16", "I;16B", "I;16L", "F"):
            raise FormatError(f"{path}: unsupported bit depth (mode {mode}); expected 8-bit")
        if mode == "P":
            im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            mode = im.mode
        if mode not in ("L", "LA", "RGB", "RGBA"):
            raise FormatError(f"{path}: unsupported image mode {mode}")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: expected 8-bit samples, got {arr.dtype}")
    # alpha carries no intensity information
    if mode == "LA":
        arr = arr[..., 0]
    elif mode == "RGBA":
        arr = arr[..., :3]
    return arr


def load_gray(path):
    arr = _decode(path)
    if arr.ndim == 3:
        if not (np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2])):
            raise FormatError(f"{path}: infrared image has three distinct channels")
        arr = arr[..., 0]
    return arr.astype(np.float64) / 255.0


def load_rgb(path):
    arr = _decode(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr.astype(np.float64) / 255.0


def load_pair(ir_path, vis_path, id=None):
    if id is None:
        id = Path(ir_path).stem
    return ImagePair(load_gray(ir_path), load_rgb(vis_path), id=id)


def save_image(path, img):
    """Write a [0, 1] float image (2-D or p x q x 3) as 8-bit PNG/BMP."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# colour

def rgb_to_ycbcr(visible):
    visible = np.asarray(visible, dtype=np.float64)
    if visible.shape[-1] != 3:
        raise ValidationError(f"expected trailing channel axis of 3, got {visible.shape}")
    if not np.all(np.isfinite(visible)) or visible.min() < 0.0 or visible.max() > 1.0:
        raise ValidationError("rgb_to_ycbcr expects values in [0, 1]")
    ycc = visible @ _RGB2YCC.T
    # luma weights sum to one; this form is exact for neutral pixels
    r = visible[..., 0]
    ycc[..., 0] = r + _RGB2YCC[0, 1] * (visible[..., 1] - r) + _RGB2YCC[0, 2] * (visible[..., 2] - r)
    ycc[..., 1:] += 0.5
    # float rounding can push extremes a few ulp outside [0, 1]
    np.clip(ycc, 0.0, 1.0, out=ycc)
    return ycc[..., 0], ycc[..., 1:]


def ycbcr_to_rgb(y, cbcr):
    y = np.asarray(y, dtype=np.float64)
    cbcr = np.asarray(cbcr, dtype=np.float64)
    if cbcr.shape != y.shape + (2,):
        raise ValidationError(f"luma {y.shape} and chroma {cbcr.shape} shapes disagree")
    ycc = np.concatenate([y[..., None], cbcr - 0.5], axis=-1)
    return ycc @ _YCC2RGB.T


def reattach_color(fused_y, cbcr):
    return np.clip(ycbcr_to_rgb(fused_y, cbcr), 0.0, 1.0)


def luminance(img):
    """Luma of a colour image; grayscale images pass through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return rgb_to_ycbcr(img)[0]


# ---------------------------------------------------------------------------
# annotations

def encode_rle(mask):
    """Row-major run-length code as alternating [class, run, class, run, ...]."""
    flat = np.asarray(mask).ravel()
    counts = []
    if flat.size:
        change = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [flat.size]])
        for s, e in zip(starts, ends):
            counts += [int(flat[s]), int(e - s)]
    return {"counts": counts, "shape": [int(d) for d in np.shape(mask)]}


def decode_rle(rle):
    try:
        shape = tuple(int(d) for d in rle["shape"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationParseError(f"malformed mask_rle: {exc}") from exc
    if len(shape) != 2 or len(counts) % 2:
        raise AnnotationParseError("mask_rle needs a 2-D shape and (class, run) pairs")
    values, runs = counts[0::2], counts[1::2]
    if any(r < 0 for r in runs) or sum(runs) != shape[0] * shape[1]:
        raise AnnotationParseError(f"mask_rle runs do not cover shape {shape}")
    return np.repeat(np.array(values, dtype=np.int64), runs).reshape(shape)


def write_annotations(path, boxes, mask):
    doc = {
        "boxes": [{"class": int(b.cls), "xyxy": [float(v) for v in b.xyxy]} for b in boxes],
        "mask_rle": encode_rle(mask),
    }
    Path(path).write_text(json.dumps(doc))


def load_annotations(path, class_count):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "boxes" not in doc or "mask_rle" not in doc:
        raise AnnotationParseError(f"{path}: expected keys 'boxes' and 'mask_rle'")
    boxes = []
    for entry in doc["boxes"]:
        try:
            cls = entry["class"]
            xyxy = tuple(float(v) for v in entry["xyxy"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationParseError(f"{path}: malformed box {entry!r}") from exc
        if not isinstance(cls, int) or isinstance(cls, bool) or len(xyxy) != 4:
            raise AnnotationParseError(f"{path}: malformed box {entry!r}")
        boxes.append(Box(cls, xyxy))
    return AnnotationSet(boxes, decode_rle(doc["mask_rle"]), class_count)


# ---------------------------------------------------------------------------
# manifest and batching

@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list = field(default_factory=list)  # (id, ir, vis, ann or None)

    @classmethod
    def from_directory(cls, root, split):
        root = Path(root)
        base = root / split
        ir_dir, vis_dir, ann_dir = base / "ir", base / "vis", base / "ann"
        if not ir_dir.is_dir() or not vis_dir.is_dir():
            raise FileNotFoundError(f"{base} must contain ir/ and vis/ directories")
        entries = []
        for ir in sorted(ir_dir.iterdir(), key=lambda p: p.stem):
            if ir.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            vis = find_image(vis_dir, ir.stem)
            if vis is None:
                raise FileNotFoundError(f"no visible image for id {ir.stem} in {vis_dir}")
            ann = ann_dir / f"{ir.stem}.json"
            entries.append((ir.stem, ir, vis, ann if ann.is_file() else None))
        return cls(root, split, entries)

    @classmethod
    def from_path(cls, path):
        """Accept ``<root>/<split>`` as one path."""
        path = Path(path)
        return cls.from_directory(path.parent, path.name)

    @property
    def ids(self):
        return [e[0] for e in self.entries]

    def __len__(self):
        return len(self.entries)


def find_image(directory, stem):
    for suffix in IMAGE_SUFFIXES:
        p = directory / f"{stem}{suffix}"
        if p.is_file():
            return p
    return None


@dataclass
class Sample:
    id: str
    ir: np.ndarray
    vis_y: np.ndarray
    vis_cbcr: np.ndarray
    annotations: AnnotationSet = None


@dataclass
class Batch:
    ids: list
    ir: torch.Tensor     # (B, 1, H, W)
    vis_y: torch.Tensor  # (B, 1, H, W)
    vis_cbcr: np.ndarray
    annotations: list
    masks: torch.Tensor = None  # (B, H, W) int64 or None


class PairDataset:
    """Loads and caches every pair of a manifest; read-only afterwards."""

    def __init__(self, manifest, class_count):
        self.manifest = manifest
        self.class_count = class_count
        self.samples = []
        for id_, ir, vis, ann in manifest.entries:
            pair = load_pair(ir, vis, id=id_)
            y, cbcr = rgb_to_ycbcr(pair.visible)
            annots = None
            if ann is not None:
                annots = load_annotations(ann, class_count)
                if annots.mask.shape != pair.shape:
                    raise ValidationError(f"{id_}: mask shape {annots.mask.shape} != image {pair.shape}")
            self.samples.append(Sample(id_, pair.infrared, y, cbcr, annots))

    def __len__(self):
        return len(self.samples)

    def batch_order(self, epoch, seed, shuffle=True):
        idx = np.arange(len(self.samples))
        if shuffle:
            idx = np.random.default_rng([seed, epoch]).permutation(idx)
        return idx

    def batches(self, batch_size, epoch=0, seed=0, shuffle=True, dtype=torch.float32):
        order = self.batch_order(epoch, seed, shuffle)
        for start in range(0, len(order), batch_size):
            yield collate([self.samples[i] for i in order[start:start + batch_size]], dtype)


def collate(samples, dtype=torch.float32):
    shapes = {s.ir.shape for s in samples}
    if len(shapes) != 1:
        raise ValidationError(f"cannot batch pairs of different sizes {sorted(shapes)}")
    ir = torch.as_tensor(np.stack([s.ir for s in samples]), dtype=dtype)[:, None]
    vis_y = torch.as_tensor(np.stack([s.vis_y for s in samples]), dtype=dtype)[:, None]
    annots = [s.annotations for s in samples]
    masks = None
    if all(a is not None for a in annots):
        masks = torch.as_tensor(np.stack([a.mask for a in annots]), dtype=torch.int64)
    return Batch([s.id for s in samples], ir, vis_y,
                 np.stack([s.vis_cbcr for s in samples]), annots, masks)


def output_dir(default):
    return Path(os.environ.get("JOINTFUSE_OUTPUT_DIR", default))
