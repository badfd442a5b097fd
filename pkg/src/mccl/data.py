"""Synthetic co-saliency groups, on-disk dataset I/O, augmentation and group batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from mccl import ops
from mccl.tensor import Tensor, suspend

FAMILIES = ("circle", "square", "triangle", "star", "cross", "ring", "hexagon", "diamond")
IMAGE_EXTS = (".png", ".jpg", ".jpeg")
IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class LoadError(IOError):
    pass


class BatchError(ValueError):
    pass


@dataclass
class ImageGroup:
    class_id: str
    images: list  # 3 x H x W float32 in [0, 1]
    gts: list  # 1 x H x W float32 in {0, 1}
    stems: list
    orig_sizes: list = field(default_factory=list)  # (h, w) before resizing

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class GroupBatch:
    class_ids: list
    indices: list  # per group, the image indices drawn
    images: np.ndarray  # (N*S) x 3 x H x W
    gts: np.ndarray  # (N*S) x 1 x H x W
    group_size: int

    @property
    def group_sizes(self) -> list:
        return [self.group_size] * len(self.class_ids)


# ---------------------------------------------------------------------------
# shape rendering

def _polygon(n: int, cx: float, cy: float, r: float, angle: float, radii=None) -> list:
    radii = radii if radii is not None else [r] * n
    pts = []
    for k in range(n):
        t = angle + 2 * np.pi * k / n
        pts.append((cx + radii[k] * np.cos(t), cy + radii[k] * np.sin(t)))
    return pts


def _cross(cx, cy, r, angle, arm=0.34):
    a = arm * r
    base = [(-a, -r), (a, -r), (a, -a), (r, -a), (r, a), (a, a), (a, r), (-a, r), (-a, a), (-r, a), (-r, -a), (-a, -a)]
    c, s = np.cos(angle), np.sin(angle)
    return [(cx + x * c - y * s, cy + x * s + y * c) for x, y in base]


def shape_mask(family: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    """Binary (size x size) mask of one shape instance."""
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    if family == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif family == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        ri = 0.55 * r
        draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=0)
    elif family == "square":
        draw.polygon(_polygon(4, cx, cy, r * 1.1, angle), fill=255)
    elif family == "triangle":
        draw.polygon(_polygon(3, cx, cy, r * 1.15, angle), fill=255)
    elif family == "hexagon":
        draw.polygon(_polygon(6, cx, cy, r, angle), fill=255)
    elif family == "star":
        draw.polygon(_polygon(10, cx, cy, r, angle, [r * 1.15 if k % 2 == 0 else r * 0.5 for k in range(10)]), fill=255)
    elif family == "cross":
        draw.polygon(_cross(cx, cy, r * 1.05, angle), fill=255)
    elif family == "diamond":
        draw.polygon(_polygon(4, cx, cy, r, angle, [r * 1.2, r * 0.6, r * 1.2, r * 0.6]), fill=255)
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return np.asarray(img) > 127


def _smooth_field(rng: np.random.Generator, size: int, cells: int, channels: int) -> np.ndarray:
    coarse = rng.random((1, channels, cells, cells))
    with suspend():
        return ops.bilinear_resize(Tensor(coarse, dtype=np.float64), size, size).data[0]


def _fill_texture(rng: np.random.Generator, size: int, avoid=None, min_contrast: float = 0.0) -> np.ndarray:
    base = rng.uniform(0.05, 0.95, size=3)
    for _ in range(100):
        if avoid is None or np.abs(base - avoid).max() >= min_contrast:
            break
        base = rng.uniform(0.05, 0.95, size=3)
    kind = rng.integers(3)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:
        tex = np.zeros((size, size))
    elif kind == 1:
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4, 10)
        tex = 0.12 * np.sign(np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period))
    else:
        tex = 0.15 * (_smooth_field(rng, size, 6, 1)[0] - 0.5)
    return np.clip(base[:, None, None] + tex[None], 0, 1)


MIN_CONTRAST = 0.3
DISTRACTOR_SCALE = (0.06, 0.11)


@dataclass
class RenderedSample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    gt: np.ndarray  # H x W bool, visible target pixels
    target: np.ndarray  # H x W bool, full target silhouette
    distractors: np.ndarray  # H x W bool, union of distractor silhouettes


def render_sample(family: str, size: int, rng: np.random.Generator, occlusion_budget: float = 0.2,
                  max_distractors: int = 3, min_contrast: float = MIN_CONTRAST,
                  distractor_scale: tuple = DISTRACTOR_SCALE) -> RenderedSample:
    """One cluttered image whose salient object belongs to ``family``.

    Distractors come from other families, are smaller, and are placed so they
    hide at most ``occlusion_budget`` of the target.
    """
    others = [f for f in FAMILIES if f != family]
    image = 0.25 + 0.5 * _smooth_field(rng, size, 4, 3)
    image += rng.normal(0, 0.03, size=image.shape)

    r = rng.uniform(0.2, 0.3) * size
    cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
    target = shape_mask(family, size, cx, cy, r, rng.uniform(0, 2 * np.pi))
    if not target.any():  # pragma: no cover - radius is always several pixels
        raise RuntimeError("empty target mask")
    tex = _fill_texture(rng, size, image[:, target].mean(axis=1), min_contrast)
    image = np.where(target[None], tex, image)

    area = target.sum()
    occluders = np.zeros_like(target)
    for _ in range(int(rng.integers(1, max_distractors + 1))):
        fam = others[int(rng.integers(len(others)))]
        for _attempt in range(50):
            rd = rng.uniform(*distractor_scale) * size
            dx, dy = rng.uniform(rd, size - rd, size=2)
            m = shape_mask(fam, size, dx, dy, rd, rng.uniform(0, 2 * np.pi))
            if (target & (occluders | m)).sum() <= occlusion_budget * area:
                break
        else:
            continue
        occluders |= m
        image = np.where(m[None], _fill_texture(rng, size, image[:, m].mean(axis=1), min_contrast), image)
    gt = target & ~occluders
    return RenderedSample(np.clip(image, 0, 1).astype(np.float32), gt, target, occluders)


def group_name(index: int) -> str:
    return f"{index:02d}_{FAMILIES[index % len(FAMILIES)]}"


def image_seed(seed: int, group: int, image: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(group, image)).generate_state(1)[0])


def synth_generate(n_groups: int, images_per_group: int, size: int, seed: int, out_dir,
                   occlusion_budget: float = 0.2) -> Path:
    """Write ``n_groups`` groups of rendered images and masks under ``out_dir``.

    Layout: ``images/<group>/<stem>.png`` (RGB), ``gts/<group>/<stem>.png``
    (8-bit 0/255) and ``manifest.tsv`` with columns group, stem, seed.
    """
    if size % 32:
        raise ValueError(f"image size {size} is not divisible by 32")
    if images_per_group % 2:
        raise ValueError(f"images per group must be even, got {images_per_group}")
    out = Path(out_dir)
    rows = []
    for g in range(n_groups):
        name = group_name(g)
        family = FAMILIES[g % len(FAMILIES)]
        (out / "images" / name).mkdir(parents=True, exist_ok=True)
        (out / "gts" / name).mkdir(parents=True, exist_ok=True)
        for i in range(images_per_group):
            s = image_seed(seed, g, i)
            sample = render_sample(family, size, np.random.default_rng(s), occlusion_budget)
            stem = f"{name}_{i:03d}"
            save_rgb(out / "images" / name / f"{stem}.png", sample.image)
            save_gray(out / "gts" / name / f"{stem}.png", sample.gt.astype(np.float32))
            rows.append((name, stem, s))
    with open(out / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("group", "stem", "seed"))
        w.writerows(rows)
    return out


# ---------------------------------------------------------------------------
# PNG I/O

def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(np.transpose(image, (1, 2, 0)))).save(path, format="PNG")


def save_gray(path, values: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(values), mode="L").save(path, format="PNG")


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def resize_array(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a C x H x W array."""
    if x.shape[1:] == (h, w):
        return x
    with suspend():
        return ops.bilinear_resize(Tensor(x[None], dtype=x.dtype), h, w).data[0]


def _list_images(folder: Path) -> list:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def load_images(root, size: Optional[int] = None) -> list:
    """Groups of images without ground truth (inference input)."""
    root = Path(root)
    groups = []
    for gdir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = _list_images(gdir)
        if not files:
            raise LoadError(f"group {gdir.name!r} under {root} contains no images")
        images, stems, sizes = [], [], []
        for f in files:
            img = read_rgb(f)
            sizes.append(img.shape[1:])
            images.append(resize_array(img, size, size) if size else img)
            stems.append(f.stem)
        groups.append(ImageGroup(gdir.name, images, [], stems, sizes))
    return groups


def load_dataset(root, gt_root, size: Optional[int] = None) -> list:
    """Load ``root/<group>/<stem>.*`` with masks from ``gt_root/<group>/<stem>.png``.

    Images are scaled to [0, 1] and masks binarised at 0.5; with ``size`` both
    are resized to size x size (masks re-binarised after bilinear resampling).
    """
    gt_root = Path(gt_root)
    groups = load_images(root, size)
    for g in groups:
        for stem in g.stems:
            gpath = gt_root / g.class_id / f"{stem}.png"
            if not gpath.exists():
                raise LoadError(f"missing ground truth for image {stem!r} in group {g.class_id!r} ({gpath})")
            gt = read_gray(gpath)[None]
            if gt.shape[1:] != g.orig_sizes[len(g.gts)]:
                gt = resize_array(gt, *g.orig_sizes[len(g.gts)])
            if size:
                gt = resize_array(gt, size, size)
            gt = (gt >= 0.5).astype(np.float32)
            if not gt.any():
                raise LoadError(f"ground truth for {stem!r} in group {g.class_id!r} is empty")
            g.gts.append(gt)
    return groups


# ---------------------------------------------------------------------------
# augmentation and batching

def color_jitter(image: np.ndarray, rng: np.random.Generator, low: float = 0.8, high: float = 1.2) -> np.ndarray:
    b, c, s = rng.uniform(low, high, size=3)
    out = image * b
    gray = out.mean()
    out = (out - gray) * c + gray
    lum = out.mean(axis=0, keepdims=True)
    out = lum + (out - lum) * s
    return np.clip(out, 0, 1).astype(np.float32)


def augment(image: np.ndarray, gt: np.ndarray, seed, p_flip: float = 0.5, p_color: float = 0.5,
            p_rotate: float = 0.5, max_angle: float = 10.0) -> tuple:
    """Random horizontal flip, colour jitter and small rotation of an image/mask pair."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip, color, rotate = rng.random(3)
    angle = rng.uniform(-max_angle, max_angle)
    if flip < p_flip:
        image = image[:, :, ::-1]
        gt = gt[:, :, ::-1]
    if color < p_color:
        image = color_jitter(image, rng)
    if rotate < p_rotate:
        rot_img = ndimage.rotate(image, angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
        rot_gt = ndimage.rotate(gt.astype(np.float32), angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
        rot_gt = (rot_gt >= 0.5).astype(np.float32)
        if rot_gt.any():
            image, gt = np.clip(rot_img, 0, 1), rot_gt
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(gt, dtype=np.float32)


def even_floor(n: int) -> int:
    return n - (n % 2)


def batch_group_size(sizes: Sequence[int], cap: int) -> int:
    return even_floor(min(list(sizes) + [cap]))


def make_batch(groups: Sequence[ImageGroup], N: int = 2, cap: int = 16, seed=None,
               classes: Optional[Sequence[int]] = None) -> GroupBatch:
    """Draw ``N`` distinct groups and ``S`` images from each without replacement.

    ``S`` is the smallest group size (capped at ``cap``) rounded down to even.
    ``classes`` pins which groups are used instead of sampling them.
    """
    if N < 1:
        raise BatchError(f"N must be at least 1, got {N}")
    if len(groups) < N:
        raise BatchError(f"need {N} classes, only {len(groups)} available")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = list(classes) if classes is not None else [int(i) for i in rng.choice(len(groups), size=N, replace=False)]
    for i in chosen:
        if len(groups[i]) == 0:
            raise BatchError(f"group {groups[i].class_id!r} is empty")
    S = batch_group_size([len(groups[i]) for i in chosen], cap)
    if S < 2:
        raise BatchError(f"groups too small for an even split (S={S})")
    ids, indices, images, gts = [], [], [], []
    for i in chosen:
        g = groups[i]
        pick = rng.choice(len(g), size=S, replace=False)
        ids.append(g.class_id)
        indices.append([int(p) for p in pick])
        images.extend(g.images[p] for p in pick)
        gts.extend(g.gts[p] for p in pick)
    return GroupBatch(ids, indices, np.stack(images), np.stack(gts), S)


def normalize(images: np.ndarray) -> np.ndarray:
    """Per-channel standardisation of B x 3 x H x W images in [0, 1]."""
    return ((images - IMAGE_MEAN[None, :, None, None]) / IMAGE_STD[None, :, None, None]).astype(np.float32)


def split_holdout(groups: Sequence[ImageGroup], n_test: int) -> tuple:
    """Last ``n_test`` images of every group become a test set."""
    train, test = [], []
    for g in groups:
        k = len(g) - n_test
        train.append(ImageGroup(g.class_id, g.images[:k], g.gts[:k], g.stems[:k], g.orig_sizes[:k]))
        test.append(ImageGroup(g.class_id, g.images[k:], g.gts[k:], g.stems[k:], g.orig_sizes[k:]))
    return train, test


def dataset_roots(root) -> tuple:
    """(image_root, gt_root) for a dataset directory written by :func:`synth_generate`."""
    root = Path(root)
    if (root / "images").is_dir() and (root / "gts").is_dir():
        return root / "images", root / "gts"
    raise LoadError(f"{root} does not contain images/ and gts/ folders")

