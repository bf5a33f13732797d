"""Synthetic street-like scenes with strong directional structure, plus
augmentation and PPM/PGM dataset IO.

Classes: 0 background, 1 road (horizontal band), 2 pole (thin vertical),
3 wall (large rectangle), 4 blob (ellipse). Poles and walls share similar
base colors on purpose: locally they are ambiguous and only shape context
separates them.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, LabelError

CLASS_NAMES = ("background", "road", "pole", "wall", "blob")
IGNORE_LABEL = 255

# Per-class base RGB. Pole and wall are deliberately close.
_BASE_COLORS = np.array([
    [0.35, 0.55, 0.75],   # background: sky-ish
    [0.30, 0.30, 0.32],   # road: dark gray
    [0.62, 0.58, 0.50],   # pole
    [0.60, 0.56, 0.52],   # wall
    [0.20, 0.65, 0.25],   # blob: green
])


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 64
    n_classes: int = 5
    densities: dict = field(default_factory=lambda: {
        "road": 0.22, "pole": 0.02, "wall": 0.14, "blob": 0.07})
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.width % 32 or self.height % 32:
            raise ContractError("scene dims must be multiples of 32")
        if self.n_classes != 5:
            raise ContractError("generator draws exactly 5 classes")


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    scales: tuple = (0.75, 1.0, 1.5, 1.75, 2.0)
    brightness: float = 0.2
    contrast: float = 0.2

    @staticmethod
    def identity():
        return AugmentConfig(hflip_prob=0.0, scales=(1.0,),
                             brightness=0.0, contrast=0.0)


def _scene_rng(spec, index):
    return np.random.default_rng(np.random.SeedSequence([spec.seed, int(index)]))


def _paint_until(labels, cls, target_pixels, draw_one, max_shapes=64):
    """Add shapes of one class until its pixel count is closest to the target.

    The last shape is reverted when it overshoots by more than it helped, so
    the expected final count sits at the target despite coarse shape sizes.
    """
    for _ in range(max_shapes):
        before = int((labels == cls).sum())
        if before >= target_pixels:
            return
        snapshot = labels.copy()
        draw_one()
        after = int((labels == cls).sum())
        if after - target_pixels > target_pixels - before:
            labels[...] = snapshot
            return


def generate_scene(spec, index):
    """Deterministic (image, labels) pair for a given (seed, index)."""
    rng = _scene_rng(spec, index)
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.uint8)
    dens = spec.densities

    # road: one horizontal band in the lower half, inflated for the expected
    # occlusion by everything drawn on top of it
    if dens.get("road", 0) > 0:
        occluders = dens.get("wall", 0) + dens.get("blob", 0) + dens.get("pole", 0)
        band_frac = min(0.45, dens["road"] / max(1e-6, 1.0 - occluders))
        band = max(2, int(round(band_frac * h)))
        top = rng.integers(h // 2, max(h // 2 + 1, h - band))
        labels[top:top + band, :] = 1

    def draw_wall():
        ww = int(rng.integers(w // 10, w // 3))
        wh = int(rng.integers(h // 5, int(h * 0.55)))
        x0 = int(rng.integers(0, w - ww))
        y0 = int(rng.integers(0, h - wh))
        labels[y0:y0 + wh, x0:x0 + ww] = 3

    def draw_blob():
        ry = int(rng.integers(max(2, h // 16), h // 6))
        rx = int(rng.integers(max(2, w // 20), w // 8))
        cy = int(rng.integers(ry, h - ry))
        cx = int(rng.integers(rx, w - rx))
        yy, xx = np.ogrid[:h, :w]
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        labels[mask] = 4

    def draw_pole():
        pw = int(rng.integers(1, 4))                     # 1-3 px wide
        min_h = max(h // 3, 5 * pw)                      # aspect >= 5
        ph = int(rng.integers(min_h, int(h * 0.85)))
        x0 = int(rng.integers(0, w - pw))
        y0 = int(rng.integers(0, h - ph))
        labels[y0:y0 + ph, x0:x0 + pw] = 2

    # later classes occlude earlier ones; inflate each target accordingly
    total = h * w
    wall_infl = 1.0 / max(1e-6, 1.0 - dens.get("blob", 0) - dens.get("pole", 0))
    blob_infl = 1.0 / max(1e-6, 1.0 - dens.get("pole", 0))
    _paint_until(labels, 3, int(dens.get("wall", 0) * wall_infl * total), draw_wall)
    _paint_until(labels, 4, int(dens.get("blob", 0) * blob_infl * total), draw_blob)
    _paint_until(labels, 2, int(dens.get("pole", 0) * total), draw_pole)

    image = _BASE_COLORS[labels].transpose(2, 0, 1).copy()
    if spec.noise:
        image += rng.normal(0.0, spec.noise, size=image.shape)
    # mild per-scene illumination shift so color thresholds alone don't solve it
    image += rng.uniform(-0.05, 0.05)
    return np.clip(image, 0.0, 1.0), labels


def _nearest_coords(src, dst):
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    return np.clip(np.round(pos).astype(np.int64), 0, src - 1)


def resize_image(image, target):
    """Bilinear (align-corners-false) resize of a CxHxW float image."""
    c, h, w = image.shape
    ht, wt = target
    if (ht, wt) == (h, w):
        return image.copy()

    def coords(src, dst):
        pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0, src - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), src - 1)
        return lo, np.minimum(lo + 1, src - 1), pos - lo

    h0, h1, ah = coords(h, ht)
    w0, w1, aw = coords(w, wt)
    top = image[:, h0, :] * (1 - ah)[None, :, None] + image[:, h1, :] * ah[None, :, None]
    return (top[:, :, w0] * (1 - aw)[None, None, :]
            + top[:, :, w1] * aw[None, None, :])


def resize_labels(labels, target):
    """Nearest-neighbour resize of an HxW label map."""
    hy = _nearest_coords(labels.shape[0], target[0])
    hx = _nearest_coords(labels.shape[1], target[1])
    return labels[np.ix_(hy, hx)]


def augment(image, labels, cfg, rng):
    """Joint flip/scale/crop plus image-only color jitter.

    Scaling resamples the image bilinearly and the labels with nearest;
    the pair is then cropped or padded back to its original size, padding
    labels with the ignore value.
    """
    h, w = labels.shape
    if rng.random() < cfg.hflip_prob:
        image = image[:, :, ::-1].copy()
        labels = labels[:, ::-1].copy()
    scale = cfg.scales[rng.integers(len(cfg.scales))]
    if scale != 1.0:
        hs, ws = max(1, round(h * scale)), max(1, round(w * scale))
        image = resize_image(image, (hs, ws))
        labels = resize_labels(labels, (hs, ws))
        if hs >= h:
            y0 = int(rng.integers(0, hs - h + 1))
            x0 = int(rng.integers(0, ws - w + 1))
            image = image[:, y0:y0 + h, x0:x0 + w]
            labels = labels[y0:y0 + h, x0:x0 + w]
        else:
            pad_img = np.zeros((3, h, w), dtype=image.dtype)
            pad_lab = np.full((h, w), IGNORE_LABEL, dtype=labels.dtype)
            y0 = int(rng.integers(0, h - hs + 1))
            x0 = int(rng.integers(0, w - ws + 1))
            pad_img[:, y0:y0 + hs, x0:x0 + ws] = image
            pad_lab[y0:y0 + hs, x0:x0 + ws] = labels
            image, labels = pad_img, pad_lab
    if cfg.brightness:
        image = image + rng.uniform(-cfg.brightness, cfg.brightness)
    if cfg.contrast:
        c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        mean = image.mean()
        image = (image - mean) * c + mean
    if cfg.brightness or cfg.contrast:
        image = np.clip(image, 0.0, 1.0)
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


# ---------------------------------------------------------------- on-disk IO

def write_ppm(path, image):
    """Binary P6, maxval 255, from a 3xHxW float image in [0,1]."""
    c, h, w = image.shape
    if c != 3:
        raise ContractError("PPM writer expects a 3-channel image")
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.transpose(1, 2, 0).tobytes())


def write_pgm(path, labels):
    """Binary P5, maxval 255, class index per pixel (255 = ignore)."""
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def _read_header(f, magic):
    def token():
        t = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        while ch and not ch.isspace():
            t += ch
            ch = f.read(1)
        if not t:
            raise FormatError("truncated header")
        return t

    if token() != magic:
        raise FormatError(f"bad magic, expected {magic.decode()}")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise FormatError("non-numeric header field") from e
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"unsupported header {w}x{h} maxval {maxval}")
    return w, h


def read_ppm(path):
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6")
        raw = f.read(3 * w * h)
        if len(raw) != 3 * w * h:
            raise FormatError("truncated pixel payload")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path, n_classes=5):
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5")
        raw = f.read(w * h)
        if len(raw) != w * h:
            raise FormatError("truncated pixel payload")
    labels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
    bad = (labels != IGNORE_LABEL) & (labels >= n_classes)
    if np.any(bad):
        raise LabelError(f"label values {np.unique(labels[bad])} "
                         f"out of range for {n_classes} classes")
    return labels


def write_dataset(out_dir, spec, count, val_fraction=0.2):
    """Generate `count` scenes and write train/val splits with manifests."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    n_val = int(round(count * val_fraction))
    manifests = {"train": [], "val": []}
    for i in range(count):
        split = "val" if i >= count - n_val else "train"
        image, labels = generate_scene(spec, i)
        rel = f"images/{split}_{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, rel), image)
        write_pgm(os.path.join(out_dir, label_path_for(rel)), labels)
        manifests[split].append(rel)
    for split, names in manifests.items():
        with open(os.path.join(out_dir, f"{split}.txt"), "w") as f:
            for name in sorted(names):
                f.write(name + "\n")
    return manifests


def label_path_for(image_rel):
    return image_rel.replace("images/", "labels/").replace(".ppm", ".pgm")


class SegDataset:
    """Reads (image, labels) pairs listed by a split manifest."""

    def __init__(self, root, split, n_classes=5):
        self.root = root
        self.n_classes = n_classes
        manifest = os.path.join(root, f"{split}.txt")
        if not os.path.exists(manifest):
            raise FormatError(f"missing manifest {manifest}")
        with open(manifest) as f:
            self.items = [line.strip() for line in f if line.strip()]

    def __len__(self):
        return len(self.items)

    def load(self, i):
        rel = self.items[i]
        image = read_ppm(os.path.join(self.root, rel))
        labels = read_pgm(os.path.join(self.root, label_path_for(rel)),
                          self.n_classes)
        return image, labels
