"""Dataset ingestion, preprocessing and pair sampling.

Three sources produce `ImageSample`s: big-endian IDX files, manifest-based
PGM folders, and a built-in synthetic text renderer. All pixels are float64
in [0, 1] on a fixed canvas; labels are canonicalized strings, with truly
blank images carrying the BLANK_LABEL sentinel so blanks behave as an
ordinary class.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

Array = np.ndarray

BLANK_LABEL = "␀BLANK␀"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    """Raised for malformed datasets, manifests or image files."""


def canonical_label(label: str) -> str:
    """Trim and collapse internal whitespace; empty maps to the blank sentinel."""
    out = re.sub(r"\s+", " ", label.strip())
    return out if out else BLANK_LABEL


@dataclass
class ImageSample:
    """One grayscale raster with its ground-truth label and provenance."""

    id: str
    pixels: Array  # [1, H, W] float64 in [0, 1]
    label: str
    source: str  # idx | manifest | synthetic

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 1:
            raise DataError(f"sample {self.id}: pixels must be [1,H,W], got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError(f"sample {self.id}: pixel values outside [0,1]")
        if not self.label:
            raise DataError(f"sample {self.id}: empty label (blanks use the sentinel)")


@dataclass
class PairExample:
    """Two samples with their similarity indicator (0 similar, 1 dissimilar)."""

    a: ImageSample
    b: ImageSample
    y: int

    def __post_init__(self):
        same = canonical_label(self.a.label) == canonical_label(self.b.label)
        if self.y != (0 if same else 1):
            raise DataError(
                f"pair ({self.a.id}, {self.b.id}): y={self.y} inconsistent with labels"
            )


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_idx_array(path) -> Array:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated at byte {len(raw)}, no magic")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic == IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated at byte {len(raw)}, incomplete dims")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataError(
            f"{path}: expected {expected} bytes for dims {dims}, "
            f"truncated/overlong at byte {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx(images_path, labels_path) -> List[ImageSample]:
    """Load an IDX image/label file pair; pixel bytes are scaled by 1/255."""
    images = _read_idx_array(images_path)
    labels = _read_idx_array(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: not an image file")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: not a label file")
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    stem = Path(images_path).name.split(".")[0]
    pixels = images.astype(np.float64) / 255.0
    return [
        ImageSample(
            id=f"{stem}-{i}",
            pixels=pixels[i][None],
            label=str(int(labels[i])),
            source="idx",
        )
        for i in range(images.shape[0])
    ]


def write_idx(images_u8: Array, labels_u8: Sequence[int],
              images_path, labels_path) -> None:
    """Write [N,H,W] uint8 images and N small-int labels as an IDX pair."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    labels = np.ascontiguousarray(labels_u8, dtype=np.uint8)
    if labels.shape != (n,):
        raise DataError(f"label count {labels.shape} != image count {n}")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, h, w))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# PGM + manifest folders
# ---------------------------------------------------------------------------

def read_pgm(path) -> Array:
    """Read a binary 8-bit PGM ("P5") into a uint8 [H, W] array."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    fields: List[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: malformed PGM header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if not (0 < maxval <= 255):
        raise DataError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    if len(raw) - pos < width * height:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8, offset=pos,
                         count=width * height).reshape(height, width).copy()


def write_pgm(path, image_u8: Array) -> None:
    image_u8 = np.ascontiguousarray(image_u8, dtype=np.uint8)
    h, w = image_u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image_u8.tobytes())


def _resize_bilinear(img: Array, nh: int, nw: int) -> Array:
    h, w = img.shape
    if (nh, nw) == (h, w):
        return img.copy()
    ys = np.clip((np.arange(nh) + 0.5) * h / nh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(nw) + 0.5) * w / nw - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def to_canvas(img01: Array, canvas: Tuple[int, int]) -> Array:
    """Aspect-preserving rescale plus centered zero padding onto [1,H,W]."""
    ch, cw = canvas
    h, w = img01.shape
    scale = min(ch / h, cw / w)
    nh = min(ch, max(1, int(round(h * scale))))
    nw = min(cw, max(1, int(round(w * scale))))
    resized = _resize_bilinear(img01, nh, nw)
    out = np.zeros((ch, cw))
    top = (ch - nh) // 2
    left = (cw - nw) // 2
    out[top : top + nh, left : left + nw] = resized
    return np.clip(out, 0.0, 1.0)[None]


def read_manifest(directory, canvas: Tuple[int, int] = (28, 56)) -> List[ImageSample]:
    """Load a manifest.jsonl folder of PGM images onto the given canvas."""
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.is_file():
        raise DataError(f"{directory}: no manifest.jsonl")
    samples: List[ImageSample] = []
    for lineno, line in enumerate(manifest.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            fname, label = record["file"], record["label"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{manifest}:{lineno}: malformed record: {e}") from e
        path = directory / fname
        if not path.is_file():
            raise DataError(f"{manifest}:{lineno}: missing file {fname}")
        try:
            img = read_pgm(path)
        except DataError as e:
            raise DataError(f"{manifest}:{lineno}: {e}") from e
        samples.append(
            ImageSample(
                id=f"manifest-{lineno}-{Path(fname).stem}",
                pixels=to_canvas(img.astype(np.float64) / 255.0, canvas),
                label=canonical_label(str(label)),
                source="manifest",
            )
        )
    return samples


# ---------------------------------------------------------------------------
# synthetic text rendering
# ---------------------------------------------------------------------------

_FONT_ROWS = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
    " ": (".....", ".....", ".....", ".....", ".....", ".....", "....."),
    "-": (".....", ".....", ".....", ".###.", ".....", ".....", "....."),
    ".": (".....", ".....", ".....", ".....", ".....", "..##.", "..##."),
    ",": (".....", ".....", ".....", ".....", "..##.", "...#.", "..#.."),
    ":": (".....", "..##.", "..##.", ".....", "..##.", "..##.", "....."),
    "!": ("..#..", "..#..", "..#..", "..#..", "..#..", ".....", "..#.."),
    "?": (".###.", "#...#", "....#", "...#.", "..#..", ".....", "..#.."),
    "/": ("....#", "....#", "...#.", "..#..", ".#...", "#....", "#...."),
    "'": ("..#..", "..#..", ".....", ".....", ".....", ".....", "....."),
}
_UNKNOWN_GLYPH = ("#####",) * 7


def _glyph(ch: str) -> Array:
    rows = _FONT_ROWS.get(ch.upper(), _UNKNOWN_GLYPH)
    return np.array([[1.0 if c == "#" else 0.0 for c in row] for row in rows])


def _render_text_bitmap(text: str) -> Array:
    glyphs = [_glyph(ch) for ch in text]
    cols = 6 * len(glyphs) - 1
    out = np.zeros((7, cols))
    for i, g in enumerate(glyphs):
        out[:, 6 * i : 6 * i + 5] = g
    return out


@dataclass(frozen=True)
class SynthStyle:
    """Rendering knobs: integer font scale, shear slant, noise fraction."""

    scale: int = 2
    slant: float = 0.0
    noise: float = 0.0
    canvas: Tuple[int, int] = (28, 56)


def render_synthetic(label: str, style: SynthStyle = SynthStyle(),
                     seed: int = 0) -> ImageSample:
    """Render a text string; deterministic for (label, style, seed).

    Applies the style's shear, a seed-driven translation jitter within the
    free canvas margin, and salt-and-pepper noise.
    """
    if not label or not label.isprintable():
        raise DataError(f"label {label!r} is not printable")
    rng = np.random.default_rng(seed)
    bitmap = _render_text_bitmap(label)
    if style.scale > 1:
        bitmap = np.kron(bitmap, np.ones((style.scale, style.scale)))
    h, w = bitmap.shape
    shifts = np.round(style.slant * (np.arange(h) - h / 2.0)).astype(int)
    if shifts.size:
        lo, hi = int(shifts.min()), int(shifts.max())
        sheared = np.zeros((h, w + hi - lo))
        for r in range(h):
            off = shifts[r] - lo
            sheared[r, off : off + w] = bitmap[r]
        bitmap = sheared
        h, w = bitmap.shape
    ch, cw = style.canvas
    if h > ch or w > cw:
        raise DataError(
            f"label {label!r} rendered {h}x{w} overflows canvas {ch}x{cw}"
        )
    top = int(rng.integers(0, ch - h + 1))
    left = int(rng.integers(0, cw - w + 1))
    out = np.zeros((ch, cw))
    out[top : top + h, left : left + w] = bitmap
    n_noise = int(round(style.noise * out.size))
    if n_noise:
        idx = rng.choice(out.size, size=n_noise, replace=False)
        values = rng.integers(0, 2, size=n_noise).astype(np.float64)
        out.reshape(-1)[idx] = values
    # ids stay opaque: embedding the label would leak ground truth to
    # blind annotation tasks through item ids and image URLs
    tag = hashlib.blake2s(label.encode("utf-8"), digest_size=4).hexdigest()
    return ImageSample(
        id=f"synth-{tag}-{seed}",
        pixels=out[None],
        label=canonical_label(label),
        source="synthetic",
    )


def make_corpus(labels: Sequence[str], per_label: int,
                style: SynthStyle = SynthStyle(), seed: int = 0) -> List[ImageSample]:
    """per_label renders of each label, with per-sample derived seeds."""
    samples = []
    for i, label in enumerate(labels):
        for j in range(per_label):
            samples.append(render_synthetic(label, style, seed=seed + 1000 * i + j))
    return samples


# ---------------------------------------------------------------------------
# pair sampling
# ---------------------------------------------------------------------------

def _labels_index(dataset: Sequence[ImageSample]) -> Dict[str, List[int]]:
    by_label: Dict[str, List[int]] = {}
    for i, s in enumerate(dataset):
        by_label.setdefault(canonical_label(s.label), []).append(i)
    return by_label


def sample_pair_minibatch(dataset: Sequence[ImageSample],
                          rng: np.random.Generator) -> List[PairExample]:
    """Draw the fixed 10-pair minibatch: 5 similar then 5 dissimilar.

    Labels are drawn uniformly over eligible labels, then samples uniformly
    within; a sample is never paired with itself.
    """
    by_label = _labels_index(dataset)
    labels = sorted(by_label)
    rich = [lab for lab in labels if len(by_label[lab]) >= 2]
    if len(labels) < 2:
        raise DataError("need at least 2 distinct labels to sample pairs")
    if not rich:
        raise DataError("no label has 2 samples; cannot sample similar pairs")
    pairs: List[PairExample] = []
    for _ in range(5):
        lab = rich[int(rng.integers(len(rich)))]
        i, j = rng.choice(len(by_label[lab]), size=2, replace=False)
        pairs.append(PairExample(dataset[by_label[lab][i]], dataset[by_label[lab][j]], 0))
    for _ in range(5):
        la, lb = rng.choice(len(labels), size=2, replace=False)
        a = by_label[labels[la]][int(rng.integers(len(by_label[labels[la]])))]
        b = by_label[labels[lb]][int(rng.integers(len(by_label[labels[lb]])))]
        pairs.append(PairExample(dataset[a], dataset[b], 1))
    return pairs


def build_pair_pool(dataset: Sequence[ImageSample], rng: np.random.Generator,
                    n_pairs: int) -> List[PairExample]:
    """Concatenate balanced minibatches into a pool of n_pairs (multiple of 10)."""
    if n_pairs % 10:
        raise DataError("pair pool size must be a multiple of the 10-pair minibatch")
    pool: List[PairExample] = []
    for _ in range(n_pairs // 10):
        pool.extend(sample_pair_minibatch(dataset, rng))
    return pool
