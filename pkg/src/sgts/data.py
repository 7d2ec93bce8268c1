"""Synthetic gland-image benchmark: generation, sparsification, augmentation,
normalization, and binary netpbm I/O.

Images are 3xHxW float64 in [0,1]. Masks are HxW uint8 with classes
0=stroma, 1=benign, 2=malignant, 3=PDC/G and 255 as the UNLABELED sentinel.
Every sample carries both a dense oracle mask (no sentinel, evaluation only)
and a sparse mask emulating partial expert annotation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import binary_dilation

UNLABELED = 255
NUM_CLASSES = 4

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

# (low, high) inclusive instance-count ranges per gland class
DEFAULT_CLASS_MIX = {1: (1, 3), 2: (1, 3), 3: (0, 2)}


class RasterError(ValueError):
    """Malformed PPM/PGM content."""


@dataclass
class Instance:
    label: int
    mask: np.ndarray  # HxW bool
    annotated: bool = True


@dataclass
class Sample:
    image: np.ndarray       # 3xHxW float64 in [0,1]
    sparse_mask: np.ndarray  # HxW uint8 with sentinel
    dense_mask: np.ndarray   # HxW uint8, no sentinel
    instances: list = field(default_factory=list)


def _value_noise(rng, size, cell=8, amp=0.05):
    """Smooth bilinear-interpolated noise field in roughly [-amp, amp]."""
    n = size // cell + 2
    grid = rng.normal(0.0, 1.0, size=(n, n))
    pos = np.arange(size) / cell
    i0 = pos.astype(int)
    f = pos - i0
    a = grid[np.ix_(i0, i0)]
    b = grid[np.ix_(i0, i0 + 1)]
    c = grid[np.ix_(i0 + 1, i0)]
    d = grid[np.ix_(i0 + 1, i0 + 1)]
    top = a * (1 - f)[None, :] + b * f[None, :]
    bot = c * (1 - f)[None, :] + d * f[None, :]
    return amp * (top * (1 - f)[:, None] + bot * f[:, None])


def _ellipse_mask(size, cx, cy, ra, rb, angle):
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - cx
    dy = yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / ra) ** 2 + (v / rb) ** 2 <= 1.0


def _blob_mask(rng, size, cx, cy, r0):
    """Radially perturbed disc: irregular boundary, filled."""
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - cx
    dy = yy - cy
    rho = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    boundary = np.ones_like(phi) * r0
    for k in range(2, 6):
        amp = rng.uniform(0.0, 0.12)
        phase = rng.uniform(0.0, 2 * np.pi)
        boundary += r0 * amp * np.cos(k * phi + phase)
    return rho <= boundary


# Base colors deliberately overlap between classes so that pixel color alone
# does not identify the class; shape and local context carry most signal.
_BENIGN_COLOR = np.array([0.56, 0.36, 0.66])
_MALIG_COLOR = np.array([0.44, 0.28, 0.56])
_PDCG_COLOR = np.array([0.50, 0.40, 0.46])
_LUMEN_COLOR = np.array([0.94, 0.92, 0.95])
_STROMA_COLOR = np.array([0.91, 0.77, 0.84])


def generate_sample(seed: int, size: int = 64,
                    class_mix: dict | None = None) -> Sample:
    """Deterministic synthetic tissue patch with a dense oracle mask.

    Benign glands are elliptical rings around a pale lumen, malignant glands
    are irregular filled blobs, PDC/G are clusters of small discs. Later
    placements skip already-occupied pixels; unsatisfiable placements after a
    bounded retry budget simply yield fewer instances.
    """
    if size < 32 or size % 2:
        raise ValueError("size must be even and >= 32")
    mix = class_mix or DEFAULT_CLASS_MIX
    rng = np.random.default_rng(seed)

    image = np.empty((3, size, size))
    noise = _value_noise(rng, size)
    for ch in range(3):
        image[ch] = _STROMA_COLOR[ch] + noise
    dense = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros((size, size), dtype=bool)
    instances = []

    def paint(mask, color):
        jittered = np.clip(color + rng.uniform(-0.04, 0.04, size=3), 0, 1)
        for ch in range(3):
            image[ch][mask] = jittered[ch]

    def place(label, min_pixels, build):
        for _ in range(40):
            candidate, occupy, extras = build()
            free = candidate & ~occupied
            if free.sum() >= min_pixels:
                dense[free] = label
                for mask, color in extras:
                    paint(mask & ~occupied & (dense == 0), color)
                occupied[occupy] = True
                paint(free, {1: _BENIGN_COLOR, 2: _MALIG_COLOR,
                             3: _PDCG_COLOR}[label])
                instances.append(Instance(label, free))
                return True
        return False

    margin = 8
    for label in (1, 2, 3):
        lo, hi = mix[label]
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            if label == 1:
                def build():
                    cx = rng.uniform(margin, size - margin)
                    cy = rng.uniform(margin, size - margin)
                    ra = rng.uniform(5.0, 8.0)
                    rb = rng.uniform(5.0, 8.0)
                    angle = rng.uniform(0, np.pi)
                    outer = _ellipse_mask(size, cx, cy, ra, rb, angle)
                    inner = _ellipse_mask(size, cx, cy, ra * 0.45, rb * 0.45,
                                          angle)
                    return outer & ~inner, outer, [(inner, _LUMEN_COLOR)]
                place(1, 14, build)
            elif label == 2:
                def build():
                    cx = rng.uniform(margin, size - margin)
                    cy = rng.uniform(margin, size - margin)
                    r0 = rng.uniform(4.0, 7.0)
                    m = _blob_mask(rng, size, cx, cy, r0)
                    return m, m, []
                place(2, 12, build)
            else:
                def build():
                    ccx = rng.uniform(margin, size - margin)
                    ccy = rng.uniform(margin, size - margin)
                    n_disc = int(rng.integers(3, 7))
                    mask = np.zeros((size, size), dtype=bool)
                    for _ in range(n_disc):
                        dx = rng.uniform(-4, 4)
                        dy = rng.uniform(-4, 4)
                        r = rng.uniform(1.5, 2.5)
                        mask |= _ellipse_mask(size, ccx + dx, ccy + dy, r, r,
                                              0.0)
                    return mask, mask, []
                place(3, 8, build)

    # global texture field over structures and stroma alike, so flat
    # per-instance fills do not give the class away on their own
    image += _value_noise(rng, size, cell=4, amp=0.04)[None, :, :]
    # per-image stain cast: a multiplicative gain and an additive shift per
    # channel, so the color-to-class mapping is conditional on the cast and
    # generalizes across images only with enough instances seen per cast
    image *= rng.uniform(0.75, 1.25, size=3)[:, None, None]
    image += rng.uniform(-0.15, 0.15, size=3)[:, None, None]
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(image=image, sparse_mask=dense.copy(), dense_mask=dense,
                  instances=instances)


def sparsify(sample: Sample, annot_fraction: float, seed: int) -> Sample:
    """Keep each gland instance's labels with probability annot_fraction.

    At least one instance is always annotated. Stroma is labeled only inside
    a 2-pixel dilation ring around annotated instances plus two seeded random
    stroma rectangles; everything else becomes the sentinel.
    """
    if not 0.0 < annot_fraction <= 1.0:
        raise ValueError("annot_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    h, w = sample.dense_mask.shape
    flags = [bool(rng.random() < annot_fraction) for _ in sample.instances]
    if sample.instances and not any(flags):
        flags[int(rng.integers(len(flags)))] = True

    sparse = np.full((h, w), UNLABELED, dtype=np.uint8)
    annotated_union = np.zeros((h, w), dtype=bool)
    instances = []
    for inst, keep in zip(sample.instances, flags):
        instances.append(Instance(inst.label, inst.mask, annotated=keep))
        if keep:
            sparse[inst.mask] = inst.label
            annotated_union |= inst.mask

    stroma = sample.dense_mask == 0
    ring = binary_dilation(annotated_union, iterations=2) & ~annotated_union
    sparse[ring & stroma] = 0
    for _ in range(2):
        rw = int(rng.integers(6, 13))
        rh = int(rng.integers(6, 13))
        x0 = int(rng.integers(0, w - rw))
        y0 = int(rng.integers(0, h - rh))
        rect = np.zeros((h, w), dtype=bool)
        rect[y0:y0 + rh, x0:x0 + rw] = True
        sparse[rect & stroma] = 0

    return replace(sample, sparse_mask=sparse, instances=instances)


def orient_array(arr: np.ndarray, quarter_turns: int, flip: bool,
                 spatial_axes=(0, 1)) -> np.ndarray:
    """Rotate by 90-degree steps then optionally flip horizontally."""
    out = np.rot90(arr, k=quarter_turns, axes=spatial_axes)
    if flip:
        out = np.flip(out, axis=spatial_axes[1])
    return np.ascontiguousarray(out)


def apply_orientation(sample: Sample, quarter_turns: int,
                      flip: bool) -> Sample:
    """Apply the identical index permutation to the image and both masks."""
    def tf(arr, spatial_axes):
        return orient_array(arr, quarter_turns, flip, spatial_axes)

    instances = [Instance(i.label, tf(i.mask, (0, 1)), i.annotated)
                 for i in sample.instances]
    return Sample(image=tf(sample.image, (1, 2)),
                  sparse_mask=tf(sample.sparse_mask, (0, 1)),
                  dense_mask=tf(sample.dense_mask, (0, 1)),
                  instances=instances)


def augment(sample: Sample, rng, noise_sigma: float = 0.01) -> Sample:
    """Random discrete rotation, horizontal flip (p=0.5), additive Gaussian
    pixel noise clamped to [0,1]. Masks follow the spatial permutation."""
    k = int(rng.integers(4))
    flip = bool(rng.random() < 0.5)
    out = apply_orientation(sample, k, flip)
    if noise_sigma > 0:
        noisy = out.image + rng.normal(0.0, noise_sigma, size=out.image.shape)
        out = replace(out, image=np.clip(noisy, 0.0, 1.0))
    return out


def normalize(image: np.ndarray) -> np.ndarray:
    """Per-channel ImageNet standardization of a [3,H,W] image in [0,1]."""
    return (image - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]


def denormalize(image: np.ndarray) -> np.ndarray:
    return image * IMAGENET_STD[:, None, None] + IMAGENET_MEAN[:, None, None]


# ---------------------------------------------------------------------------
# Binary netpbm I/O

def _parse_header(buf: bytes, magic: bytes, path: str):
    if not buf.startswith(magic):
        raise RasterError(f"{path}: expected {magic.decode()} magic at byte 0")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise RasterError(f"{path}: malformed header at byte {pos}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise RasterError(f"{path}: missing whitespace after maxval "
                          f"at byte {pos}")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise RasterError(f"{path}: unsupported maxval {maxval} at byte "
                          f"{pos - 1}")
    return width, height, pos


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 from a [3,H,W] float image in [0,1], quantized to 8 bits."""
    _, h, w = image.shape
    payload = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(payload.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    w, h, pos = _parse_header(buf, b"P6", str(path))
    expected = 3 * w * h
    raw = buf[pos:pos + expected]
    if len(raw) != expected:
        raise RasterError(f"{path}: truncated payload at byte "
                          f"{pos + len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5 from an HxW uint8 mask (class indices or 255 sentinel)."""
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    w, h, pos = _parse_header(buf, b"P5", str(path))
    expected = w * h
    raw = buf[pos:pos + expected]
    if len(raw) != expected:
        raise RasterError(f"{path}: truncated payload at byte "
                          f"{pos + len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Dataset directory layout

SPLITS = ("train", "val", "test")


def generate_dataset(root, seed: int, counts: dict, size: int,
                     annot_fraction: float) -> None:
    """Write `<root>/{train,val,test}/<id>.{img.ppm,sparse.pgm,dense.pgm}`
    plus a tab-separated manifest. Fully deterministic in seed."""
    os.makedirs(root, exist_ok=True)
    manifest_lines = []
    for split_idx, split in enumerate(SPLITS):
        split_dir = os.path.join(root, split)
        os.makedirs(split_dir, exist_ok=True)
        for i in range(counts[split]):
            gen_seed = int(np.random.SeedSequence(
                [seed, split_idx, i, 0]).generate_state(1)[0])
            sp_seed = int(np.random.SeedSequence(
                [seed, split_idx, i, 1]).generate_state(1)[0])
            sample = sparsify(generate_sample(gen_seed, size),
                              annot_fraction, sp_seed)
            sid = f"{i:04d}"
            write_ppm(os.path.join(split_dir, f"{sid}.img.ppm"), sample.image)
            write_pgm(os.path.join(split_dir, f"{sid}.sparse.pgm"),
                      sample.sparse_mask)
            write_pgm(os.path.join(split_dir, f"{sid}.dense.pgm"),
                      sample.dense_mask)
            n_per_class = [sum(1 for ins in sample.instances
                               if ins.label == c) for c in (1, 2, 3)]
            n_annot = sum(1 for ins in sample.instances if ins.annotated)
            manifest_lines.append("\t".join(
                [f"{split}/{sid}", str(gen_seed)]
                + [str(n) for n in n_per_class] + [str(n_annot)]))
    with open(os.path.join(root, "manifest.txt"), "w") as f:
        f.write("\n".join(manifest_lines) + "\n")


def load_split(root, split) -> list:
    """Read one split back as Samples (instance lists are not persisted)."""
    split_dir = os.path.join(root, split)
    ids = sorted(name[:-8] for name in os.listdir(split_dir)
                 if name.endswith(".img.ppm"))
    samples = []
    for sid in ids:
        samples.append(Sample(
            image=read_ppm(os.path.join(split_dir, f"{sid}.img.ppm")),
            sparse_mask=read_pgm(os.path.join(split_dir, f"{sid}.sparse.pgm")),
            dense_mask=read_pgm(os.path.join(split_dir, f"{sid}.dense.pgm")),
            instances=[]))
    return samples
