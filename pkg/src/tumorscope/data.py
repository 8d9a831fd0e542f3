"""Dataset ingestion: manifests, PGM/TBIM images, bilinear resize and a synthetic blob generator."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tumorscope.tensorcore import RngState

CLASSES = ("meningioma", "glioma", "pituitary")
TBIM_MAGIC = b"TBIM"


# ---------------------------------------------------------------- errors

class DataError(ValueError):
    """Base class for ingestion failures; ``code`` is a stable identifier."""

    code = "data"

    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}" if path is not None else ""
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class MissingHeaderError(DataError):
    code = "missing_header"


class UnresolvablePathError(DataError):
    code = "unresolvable_path"


class LabelError(DataError):
    code = "label_out_of_range"


class EmptyDatasetError(DataError):
    code = "empty_dataset"


class UnknownMagicError(DataError):
    code = "unknown_magic"


class PayloadMismatchError(DataError):
    code = "payload_mismatch"


# ---------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    records: list[tuple[str, int]]
    classes: list[str]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        for i, (_, label) in enumerate(self.records):
            if not 0 <= label < len(self.classes):
                raise LabelError(f"label {label} out of range for {len(self.classes)} classes", line=i + 2)

    def __len__(self):
        return len(self.records)

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.records], dtype=np.int64)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.records[int(i)] for i in indices], list(self.classes), self.root)

    def load(self, size: tuple[int, int] | None = None, indices=None) -> np.ndarray:
        """Stack the images (optionally a subset, optionally resized) into [N,H,W,1] float32."""
        idx = range(len(self.records)) if indices is None else indices
        return load_images([self.resolve(self.records[int(i)][0]) for i in idx], size)


def read_classes(path) -> list[str]:
    path = Path(path)
    try:
        names = [ln.strip() for ln in path.read_text().splitlines()]
    except OSError as e:
        raise UnresolvablePathError(f"cannot read classes file ({e.strerror})", path) from e
    names = [n for n in names if n]
    if not names:
        raise EmptyDatasetError("classes file lists no classes", path)
    return names


def load_manifest(path, classes_path=None, check_files: bool = True) -> DatasetManifest:
    """Read ``manifest.csv`` (header ``path,label``) and its ``classes.txt``.

    Relative image paths resolve against the manifest's directory. Line
    numbers in errors count the header as line 1.
    """
    path = Path(path)
    root = path.parent
    classes = read_classes(classes_path or root / "classes.txt")
    try:
        text = path.read_text()
    except OSError as e:
        raise UnresolvablePathError(f"cannot read manifest ({e.strerror})", path) from e
    rows = list(csv.reader(text.splitlines()))
    if not rows or [c.strip() for c in rows[0]] != ["path", "label"]:
        raise MissingHeaderError("expected header 'path,label'", path, 1)
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise DataError(f"expected 2 fields, got {len(row)}", path, lineno)
        p, lab = row[0].strip(), row[1].strip()
        try:
            label = int(lab)
        except ValueError:
            raise LabelError(f"label {lab!r} is not an integer", path, lineno) from None
        if not 0 <= label < len(classes):
            raise LabelError(f"label {label} out of range for {len(classes)} classes", path, lineno)
        if check_files:
            full = Path(p) if Path(p).is_absolute() else root / p
            if not full.is_file():
                raise UnresolvablePathError(f"image {p!r} not found", path, lineno)
        records.append((p, label))
    if not records:
        raise EmptyDatasetError("empty dataset", path)
    return DatasetManifest(records, classes, root)


def write_manifest(manifest: DatasetManifest, path, classes_path=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        w.writerows(manifest.records)
    Path(classes_path or path.parent / "classes.txt").write_text("".join(c + "\n" for c in manifest.classes))


# ---------------------------------------------------------------- images

def _pgm_header(buf: bytes, path):
    """Parse the P5 header; returns (width, height, maxval, payload offset)."""
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PayloadMismatchError("truncated PGM header", path)
        tok = buf[start:pos]
        if not tok.isdigit():
            raise DataError(f"bad PGM header token {tok!r}", path)
        tokens.append(int(tok))
    # exactly one whitespace byte separates the header from the raster
    return tokens[0], tokens[1], tokens[2], pos + 1


def decode_image(buf: bytes, path=None) -> np.ndarray:
    """Decode PGM (P5, 8-bit) or TBIM bytes into an [H,W,1] float32 array in [0,1]."""
    if buf[:2] == b"P5":
        w, h, maxval, off = _pgm_header(buf, path)
        if maxval != 255:
            raise DataError(f"only 8-bit PGM is supported (maxval {maxval})", path)
    elif buf[:4] == TBIM_MAGIC:
        if len(buf) < 12:
            raise PayloadMismatchError("truncated TBIM header", path)
        h, w = struct.unpack_from("<II", buf, 4)
        off = 12
    else:
        raise UnknownMagicError(f"unknown image magic {buf[:4]!r}", path)
    if h < 1 or w < 1:
        raise DataError(f"empty image {h}x{w}", path)
    payload = buf[off:]
    if len(payload) != h * w:
        raise PayloadMismatchError(f"{h}x{w} image needs {h * w} bytes, found {len(payload)}", path)
    px = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 1)
    return px.astype(np.float32) / np.float32(255)


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise UnresolvablePathError(f"cannot read image ({e.strerror})", path) from e
    return decode_image(buf, path)


def load_images(paths, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load and stack images; each is resized to ``size`` when it differs."""
    out = []
    for p in paths:
        img = load_image(p)
        if size is not None and img.shape[:2] != tuple(size):
            img = resize_bilinear(img, size)
        out.append(img)
    if not out:
        h, w = size or (0, 0)
        return np.zeros((0, h, w, 1), np.float32)
    shapes = {a.shape for a in out}
    if len(shapes) > 1:
        raise DataError(f"images have differing shapes {sorted(shapes)}; pass a target size")
    return np.stack(out)


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Quantise a [0,1] image ([H,W] or [H,W,1]) to uint8 by rounding."""
    img = np.asarray(image)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ValueError(f"expected a single channel, got {img.shape[2]}")
        img = img[..., 0]
    if img.dtype == np.uint8:
        return img
    return np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    px = to_bytes(image)
    h, w = px.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + px.tobytes())


def write_tbim(path, image: np.ndarray) -> None:
    px = to_bytes(image)
    h, w = px.shape
    Path(path).write_bytes(TBIM_MAGIC + struct.pack("<II", h, w) + px.tobytes())


def resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel sampling, src = (i + 0.5) * H / H' - 0.5, clamped to the grid."""
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    th, tw = int(target[0]), int(target[1])
    if min(h, w, th, tw) < 1:
        raise ValueError(f"cannot resize {h}x{w} to {th}x{tw}")

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, th)
    x0, x1, fx = axis(w, tw)
    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    # convex weights keep the result inside the source range; clip float dust
    out = np.clip(out, src.min(), src.max()).astype(img.dtype if img.dtype.kind == "f" else np.float32)
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class BlobRule:
    """Geometry of one class's blob, in fractions of the image side.

    ``wobble`` > 0 modulates the radius with a low-order sinusoid, giving an
    irregular outline.
    """

    center_y: tuple[float, float]
    center_x: tuple[float, float]
    radius: tuple[float, float]
    intensity: tuple[float, float]
    wobble: tuple[float, float] = (0.0, 0.0)


DEFAULT_RULES = (
    # meningioma: mid-sized round blob in the upper band
    BlobRule((0.22, 0.32), (0.30, 0.70), (0.12, 0.16), (0.55, 0.70)),
    # glioma: large irregular blob near the centre
    BlobRule((0.45, 0.55), (0.42, 0.58), (0.20, 0.26), (0.35, 0.50), wobble=(0.10, 0.22)),
    # pituitary: small bright blob in the lower-centre band
    BlobRule((0.72, 0.82), (0.40, 0.60), (0.06, 0.09), (0.80, 0.95)),
)


@dataclass(frozen=True)
class SyntheticSpec:
    per_class: int = 100
    size: int = 64
    noise: float = 0.03
    background: float = 0.10
    seed: int = 0
    rules: tuple[BlobRule, ...] = DEFAULT_RULES
    classes: tuple[str, ...] = CLASSES

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if len(self.rules) != len(self.classes):
            raise ValueError("one blob rule per class is required")
        spans = sorted(r.intensity for r in self.rules)
        if any(a[1] >= b[0] for a, b in zip(spans, spans[1:])):
            raise ValueError("class intensity ranges must be disjoint")
        if self.background + 3 * self.noise >= spans[0][0]:
            raise ValueError("blob intensities must clear background + 3 sigma")


def blob_mask(size: int, rule: BlobRule, gen: np.random.Generator) -> np.ndarray:
    """Boolean [size,size] blob drawn from ``rule``."""
    cy = gen.uniform(*rule.center_y) * size
    cx = gen.uniform(*rule.center_x) * size
    r = gen.uniform(*rule.radius) * size
    amp = gen.uniform(*rule.wobble)
    lobes = int(gen.integers(3, 6))
    phase = gen.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    reach = r * (1 + amp * np.sin(lobes * np.arctan2(dy, dx) + phase))
    mask = dy * dy + dx * dx <= reach * reach
    if not mask.any():
        mask[min(int(cy), size - 1), min(int(cx), size - 1)] = True
    return mask


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Half-open (x0, y0, x1, y1) bounding box of a non-empty mask."""
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def synth_image(spec: SyntheticSpec, label: int, rng: RngState):
    """One synthetic image (float32 [S,S]) and its blob box."""
    gen = rng.generator()
    s = spec.size
    mask = blob_mask(s, spec.rules[label], gen)
    level = gen.uniform(*spec.rules[label].intensity)
    img = np.full((s, s), spec.background)
    img[mask] = level
    # clipped at 2.5 sigma so the background stays strictly below background + 3 sigma
    noise = np.clip(gen.normal(0.0, 1.0, (s, s)), -2.5, 2.5) * spec.noise
    img = np.clip(img + noise, 0, 1).astype(np.float32)
    return img, mask_box(mask)


def synth_generate(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write a balanced synthetic dataset under ``out_dir``.

    Produces ``images/*.pgm``, ``manifest.csv``, ``classes.txt`` and
    ``boxes.csv`` (``image_path,x0,y0,x1,y1,label``). The output is a pure
    function of ``spec``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = RngState(spec.seed)
    records, boxes = [], []
    for label, name in enumerate(spec.classes):
        for i in range(spec.per_class):
            img, box = synth_image(spec, label, rng.split(label, i))
            rel = f"images/{name}_{i:05d}.pgm"
            write_pgm(out / rel, img)
            records.append((rel, label))
            boxes.append((rel, *box, label))
    manifest = DatasetManifest(records, list(spec.classes), out)
    write_manifest(manifest, out / "manifest.csv")
    with open(out / "boxes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_path", "x0", "y0", "x1", "y1", "label"])
        w.writerows(boxes)
    return manifest
