"""Image I/O, sRGB conversion, exposure-shift simulation, dataset layout.

Pixel data moves through the pipeline as float arrays in [0, 1].  Exposure
shifts happen in linear light: decode sRGB, multiply by 2**ev, clamp, encode
back.  That is an explicit approximation of a raw-domain exposure slider
(no highlight roll-off), tagged "ev-sim v1" in tool metadata.

Two containers are supported: 8-bit PNG (quantizing, round half up) and a
raw float32 planar format for lossless test fixtures.
"""

from __future__ import annotations

import os
import re
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

EV_DOMAIN = (-2.5, -2.0, -1.5, -1.0, 0.0, 1.0, 1.5, 2.0, 2.5)

IMGF_MAGIC = b"IMGF"
IMGF_VERSION = 1

IMAGE_EXTENSIONS = (".png", ".imgf")


@dataclass
class ImageBuffer:
    """H x W x C float image, values clamped to [0, 1]; C is 1 or 3."""
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got {a.shape}")
        self.data = np.clip(a, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# color transfer

def srgb_decode_array(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    lo = v / 12.92
    hi = ((v + 0.055) / 1.055) ** 2.4
    return np.where(v <= 0.04045, lo, hi)


def srgb_encode_array(lin: np.ndarray) -> np.ndarray:
    lin = np.asarray(lin)
    lo = lin * 12.92
    hi = 1.055 * np.maximum(lin, 0.0) ** (1 / 2.4) - 0.055
    return np.where(lin <= 0.0031308, lo, hi)


def srgb_decode(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(srgb_decode_array(img.data).astype(np.float32))


def srgb_encode(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(srgb_encode_array(img.data).astype(np.float32))


def ev_shift(img: ImageBuffer, ev: float) -> ImageBuffer:
    """Scale linear light by 2**ev with hard clipping; ev 0 is the identity."""
    if img.channels != 3:
        raise ValueError(f"ev_shift needs a 3-channel image, got "
                         f"{img.channels} channels")
    if ev == 0:
        return ImageBuffer(img.data.copy())
    lin = srgb_decode_array(img.data.astype(np.float64)) * (2.0 ** ev)
    out = srgb_encode_array(np.clip(lin, 0.0, 1.0))
    return ImageBuffer(np.clip(out, 0.0, 1.0).astype(np.float32))


def rec601_luma(img: ImageBuffer) -> np.ndarray:
    """Grayscale plane: Rec.601 weights for RGB, pass-through for gray."""
    a = img.data.astype(np.float64)
    if img.channels == 1:
        return a[:, :, 0]
    return a[:, :, 0] * 0.299 + a[:, :, 1] * 0.587 + a[:, :, 2] * 0.114


# ---------------------------------------------------------------------------
# file I/O

def _atomic_write(path: str, blob: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".img-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_image(img: ImageBuffer, path: str) -> None:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".imgf":
        h, w, c = img.data.shape
        header = IMGF_MAGIC + struct.pack("<IIII", IMGF_VERSION, w, h, c)
        planes = np.ascontiguousarray(
            img.data.transpose(2, 0, 1), dtype="<f4").tobytes()
        _atomic_write(path, header + planes)
    elif ext == ".png":
        q = np.floor(img.data * 255.0 + 0.5).astype(np.uint8)
        if img.channels == 1:
            pil = Image.fromarray(q[:, :, 0], mode="L")
        else:
            pil = Image.fromarray(q, mode="RGB")
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".img-", suffix=".png")
        os.close(fd)
        try:
            pil.save(tmp, format="PNG")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    else:
        raise DataError(f"unsupported image extension {ext!r} for {path} "
                        f"(supported: {', '.join(IMAGE_EXTENSIONS)})")


def load_image(path: str) -> ImageBuffer:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".imgf":
        return _load_imgf(path)
    if ext == ".png":
        return _load_png(path)
    raise DataError(f"unsupported image extension {ext!r} for {path} "
                    f"(supported: {', '.join(IMAGE_EXTENSIONS)})")


def _load_imgf(path: str) -> ImageBuffer:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if blob[:4] != IMGF_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected "
                        f"{IMGF_MAGIC!r}")
    if len(blob) < 20:
        raise DataError(f"{path}: truncated header")
    version, w, h, c = struct.unpack("<IIII", blob[4:20])
    if version != IMGF_VERSION:
        raise DataError(f"{path}: unsupported raw image version {version}")
    if c not in (1, 3) or w < 1 or h < 1:
        raise DataError(f"{path}: invalid dimensions {w}x{h}x{c}")
    need = 20 + 4 * w * h * c
    if len(blob) != need:
        raise DataError(f"{path}: payload is {len(blob) - 20} bytes, "
                        f"expected {need - 20} for {w}x{h}x{c}")
    planes = np.frombuffer(blob, dtype="<f4", offset=20).reshape(c, h, w)
    return ImageBuffer(planes.transpose(1, 2, 0).copy())


def _load_png(path: str) -> ImageBuffer:
    try:
        pil = Image.open(path)
        pil.load()
    except UnidentifiedImageError as e:
        raise DataError(f"{path}: not a decodable image ({e})") from e
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if pil.mode not in ("L", "RGB"):
        raise DataError(f"{path}: unsupported PNG mode {pil.mode!r} "
                        f"(only 8-bit L and RGB are handled)")
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    return ImageBuffer(arr)


# ---------------------------------------------------------------------------
# tensor bridging and padding

def to_net_input(img: ImageBuffer) -> np.ndarray:
    """HWC [0,1] image -> 1CHW array in [-1, 1]."""
    a = img.data.transpose(2, 0, 1)[None]
    return (a * 2.0 - 1.0).astype(np.float32)


def from_net_output(x: np.ndarray) -> ImageBuffer:
    """1CHW [-1,1] array -> HWC [0,1] image."""
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected a single NCHW image, got shape {x.shape}")
    a = (x[0].transpose(1, 2, 0) + 1.0) * 0.5
    return ImageBuffer(np.clip(a, 0.0, 1.0).astype(np.float32))


def pad_to_multiple(img: ImageBuffer, multiple: int = 32,
                    ) -> tuple[ImageBuffer, tuple[int, int]]:
    """Reflect-pad on the bottom/right up to the next multiple; returns the
    padded image and the original (height, width) for cropping back."""
    h, w = img.height, img.width
    nh = -(-h // multiple) * multiple
    nw = -(-w // multiple) * multiple
    if (nh, nw) == (h, w):
        return img, (h, w)
    if nh - h >= h or nw - w >= w:
        # reflect needs pad < extent; tile tiny images by edge replication
        mode = "edge"
    else:
        mode = "reflect"
    a = np.pad(img.data, ((0, nh - h), (0, nw - w), (0, 0)), mode=mode)
    return ImageBuffer(a), (h, w)


def crop_to(img: ImageBuffer, size: tuple[int, int]) -> ImageBuffer:
    h, w = size
    return ImageBuffer(img.data[:h, :w].copy())


def random_crop_pair(a: ImageBuffer, b: ImageBuffer, size: int,
                     rng: np.random.Generator,
                     ) -> tuple[ImageBuffer, ImageBuffer]:
    """Same random window from two aligned images; top drawn before left."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"crop pair dimensions differ: {a.data.shape} vs "
                         f"{b.data.shape}")
    if a.height < size or a.width < size:
        raise ValueError(f"image {a.width}x{a.height} smaller than crop "
                         f"size {size}")
    top = int(rng.integers(0, a.height - size + 1))
    left = int(rng.integers(0, a.width - size + 1))
    wa = ImageBuffer(a.data[top:top + size, left:left + size].copy())
    wb = ImageBuffer(b.data[top:top + size, left:left + size].copy())
    return wa, wb


def hflip_pair(a: ImageBuffer, b: ImageBuffer, rng: np.random.Generator,
               ) -> tuple[ImageBuffer, ImageBuffer]:
    """Mirror both images horizontally with probability 1/2."""
    if rng.integers(0, 2) == 1:
        return (ImageBuffer(a.data[:, ::-1].copy()),
                ImageBuffer(b.data[:, ::-1].copy()))
    return a, b


# ---------------------------------------------------------------------------
# exposure-tag grammar and dataset layout

_TAG_RE = re.compile(r"^(?P<stem>.+)_(?P<tag>0|[PN]\d+(?:\.\d+)?)$")


def format_ev_tag(ev: float) -> str:
    if ev == 0:
        return "0"
    mag = abs(ev)
    digits = f"{mag:g}"
    return ("P" if ev > 0 else "N") + digits


def parse_ev_name(name: str) -> tuple[str, float]:
    """Split '<stem>_<P|N><digits[.digits]>' (or '<stem>_0') into stem and EV."""
    m = _TAG_RE.match(name)
    if not m:
        raise DataError(
            f"filename {name!r} lacks an exposure tag; expected "
            f"'<stem>_0', '<stem>_P<v>' or '<stem>_N<v>'")
    tag = m.group("tag")
    if tag == "0":
        ev = 0.0
    else:
        ev = float(tag[1:]) * (1.0 if tag[0] == "P" else -1.0)
    return m.group("stem"), ev


@dataclass
class PairRecord:
    input_path: str
    target_path: str
    ev: float


@dataclass
class DatasetIndex:
    records: list[PairRecord]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)


def _stem_ext(name: str) -> tuple[str, str]:
    stem, ext = os.path.splitext(name)
    return stem, ext.lower()


def index_dataset(root: str, input_dir: str = "input",
                  target_dir: str = "target",
                  split: str = "train") -> DatasetIndex:
    """Pair every input/<stem>_<tag> with target/<stem>; fails on orphans.

    Ordering is lexicographic by input filename, so the index is identical
    no matter how the directory listing comes back.
    """
    in_root = os.path.join(root, input_dir)
    tg_root = os.path.join(root, target_dir)
    for d in (in_root, tg_root):
        if not os.path.isdir(d):
            raise DataError(f"dataset root {root} lacks directory "
                            f"{os.path.basename(d)!r}")
    targets: dict[str, str] = {}
    for name in sorted(os.listdir(tg_root)):
        stem, ext = _stem_ext(name)
        if ext in IMAGE_EXTENSIONS:
            targets[stem] = os.path.join(tg_root, name)

    records: list[PairRecord] = []
    orphan_inputs: list[str] = []
    used_targets: set[str] = set()
    bad_tags: list[str] = []
    for name in sorted(os.listdir(in_root)):
        stem, ext = _stem_ext(name)
        if ext not in IMAGE_EXTENSIONS:
            continue
        try:
            base, ev = parse_ev_name(stem)
        except DataError:
            bad_tags.append(name)
            continue
        if ev not in EV_DOMAIN:
            bad_tags.append(name)
            continue
        if base not in targets:
            orphan_inputs.append(name)
            continue
        used_targets.add(base)
        records.append(PairRecord(os.path.join(in_root, name),
                                  targets[base], ev))

    orphan_targets = sorted(set(targets) - used_targets)
    problems = []
    if bad_tags:
        problems.append("inputs with missing/invalid exposure tags: "
                        + ", ".join(bad_tags))
    if orphan_inputs:
        problems.append("inputs without a target: " + ", ".join(orphan_inputs))
    if orphan_targets:
        problems.append("targets never referenced: "
                        + ", ".join(orphan_targets))
    if problems:
        raise DataError(f"dataset at {root} is inconsistent; "
                        + "; ".join(problems))
    if not records:
        raise DataError(f"dataset at {root} contains no image pairs")
    return DatasetIndex(records, split=split)
