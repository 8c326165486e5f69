"""Synthetic two-domain shape-detection scenes.

A scene is a set of geometric shapes on a background. Its appearance is a
blend ``(1 - beta) * source_style + beta * target_style`` of two renderings
of the same geometry. On top of that, each object box carries a faint
class-indexed high-frequency tile (the planted non-robust cue). In the
source domain the tile matches the object's class; in a shifted domain it is
drawn independently of the class.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .detector import BoxLabel
from .imageio import read_ppm, write_ppm

SHAPES = ("circle", "square", "triangle", "diamond", "ring")
SUPERSAMPLE = 4
MAX_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 3
    objects_per_image: tuple = (1, 3)
    size_range: tuple = (0.2, 0.5)
    max_overlap_iou: float = 0.3
    resolution: tuple = (64, 64)

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image must be a nonempty range")
        if not 0 < self.size_range[0] <= self.size_range[1] <= 1:
            raise ValueError("size_range must satisfy 0 < lo <= hi <= 1")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must lie in [1, {len(SHAPES)}]")


@dataclass(frozen=True)
class Style:
    """Colors and texture of one rendering style.

    ``palette`` lists fill colors and ``backgrounds`` lists vertical
    gradients ``(top, bottom)``. Each object draws a palette index and each
    scene a background index; the indices are shared by both styles of a
    blend, so entry ``k`` of one style corresponds to entry ``k`` of the other.
    """

    palette: tuple
    backgrounds: tuple
    noise: float = 0.02
    texture: str = "none"
    texture_period: float = 6.0
    texture_amplitude: float = 0.0
    outline: float = 0.0


def rotate_channels(color, shift=1):
    """``(r, g, b) -> (b, r, g)`` for ``shift=1``."""
    c = tuple(color)
    return c[-shift:] + c[:-shift]


SOURCE_STYLE = Style(
    palette=(
        (0.80, 0.22, 0.18), (0.18, 0.42, 0.80), (0.22, 0.65, 0.28),
        (0.85, 0.68, 0.15), (0.55, 0.25, 0.70), (0.15, 0.62, 0.62),
    ),
    backgrounds=(
        ((0.92, 0.78, 0.55), (0.80, 0.62, 0.40)),
        ((0.55, 0.78, 0.92), (0.38, 0.58, 0.80)),
        ((0.70, 0.90, 0.62), (0.52, 0.74, 0.45)),
        ((0.90, 0.62, 0.78), (0.74, 0.45, 0.60)),
        ((0.40, 0.32, 0.25), (0.25, 0.20, 0.15)),
        ((0.25, 0.32, 0.45), (0.15, 0.20, 0.32)),
    ),
    noise=0.02,
)

def power_cast(color, exponents):
    """Per-channel ``c ** e``; monotone in every channel, so a blend toward it never crosses colors."""
    return tuple(c ** e for c, e in zip(color, exponents))


def _target_background(pair):
    top, bottom = (power_cast(rotate_channels(c), (1.3, 1.3, 1.3)) for c in pair)
    return bottom, top


# Darker channel-rotated backgrounds with the gradient flipped, object colors
# under a warm power cast, fine diagonal stripes, dark outlines and more noise.
# Objects are not rotated: a linear blend between two hue rotations of a color
# passes near gray, which made mid-beta images stranger to the detector than
# the beta=1 ones.
TARGET_STYLE = Style(
    palette=tuple(power_cast(c, (0.75, 1.4, 2.0)) for c in SOURCE_STYLE.palette),
    backgrounds=tuple(_target_background(pair) for pair in SOURCE_STYLE.backgrounds),
    noise=0.06,
    texture="stripes",
    texture_period=3.0,
    texture_amplitude=0.06,
    outline=0.3,
)


@dataclass(frozen=True)
class DomainSpec:
    """Appearance of one domain.

    ``cue_fidelity`` is the probability that an object's tile is its own
    class's tile when ``nonrobust_present`` is true.
    """

    beta: float = 0.0
    source_style: Style = SOURCE_STYLE
    target_style: Style = TARGET_STYLE
    nonrobust_amplitude: float = 8 / 255
    nonrobust_present: bool = True
    cue_fidelity: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta={self.beta} outside [0, 1]")
        if not 0.0 <= self.nonrobust_amplitude <= 8 / 255 + 1e-12:
            raise ValueError("nonrobust_amplitude must lie in [0, 8/255]")
        if not 0.0 <= self.cue_fidelity <= 1.0:
            raise ValueError("cue_fidelity must lie in [0, 1]")


def source_domain(**kw):
    return DomainSpec(beta=0.0, nonrobust_present=True, **kw)


def target_domain(beta=1.0, **kw):
    return DomainSpec(beta=beta, nonrobust_present=False, **kw)


@dataclass
class AnnotatedSample:
    image: np.ndarray
    labels: list
    domain_tag: str = "source"
    # per-object tile class actually planted; bookkeeping for probes only
    cue_classes: list = field(default_factory=list)


@dataclass
class ShapeObject:
    class_id: int
    cx: float
    cy: float
    size: float
    palette_index: int

    @property
    def box(self):
        return (self.cx, self.cy, self.size, self.size)


def sample_rng(seed, index):
    """Counter-based per-sample generator: independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _box_iou(a, b):
    from .boxes import iou

    return iou(a, b)


def place_objects(scene, rng, palette_size):
    lo, hi = scene.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    objects = []
    for _ in range(count):
        cls = int(rng.integers(scene.num_classes))
        pal = int(rng.integers(palette_size))
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            size = float(rng.uniform(*scene.size_range))
            cx = float(rng.uniform(size / 2, 1 - size / 2))
            cy = float(rng.uniform(size / 2, 1 - size / 2))
            cand = ShapeObject(cls, cx, cy, size, pal)
            if all(_box_iou(cand.box, o.box) <= scene.max_overlap_iou for o in objects):
                objects.append(cand)
                break
    return objects


def _sample_grid(resolution):
    h, w = resolution
    k = SUPERSAMPLE
    ys = (np.arange(h * k) + 0.5) / (h * k)
    xs = (np.arange(w * k) + 0.5) / (w * k)
    return np.meshgrid(xs, ys)


def shape_coverage(obj, resolution):
    """Anti-aliased coverage in [0, 1] from 4x4 supersampling."""
    px, py = _sample_grid(resolution)
    r = obj.size / 2
    dx, dy = px - obj.cx, py - obj.cy
    name = SHAPES[obj.class_id]
    if name == "circle":
        inside = dx**2 + dy**2 <= r**2
    elif name == "square":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif name == "triangle":
        # apex up; half-width grows linearly from 0 at the top to r at the base
        depth = dy + r
        inside = (depth >= 0) & (dy <= r) & (np.abs(dx) <= depth / 2)
    elif name == "diamond":
        inside = np.abs(dx) + np.abs(dy) <= r
    else:  # ring
        d2 = dx**2 + dy**2
        inside = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    h, w = resolution
    k = SUPERSAMPLE
    return inside.reshape(h, k, w, k).mean(axis=(1, 3))


def _outline(cov):
    # 1-pixel rim where coverage changes
    pad = np.pad(cov, 1, mode="edge")
    grad = np.abs(pad[1:-1, 2:] - pad[1:-1, :-2]) + np.abs(pad[2:, 1:-1] - pad[:-2, 1:-1])
    return np.clip(grad, 0.0, 1.0)


def render_style(objects, coverages, style, resolution, noise_field, background_index=0):
    h, w = resolution
    pair = style.backgrounds[background_index % len(style.backgrounds)]
    top, bottom = (np.asarray(c, dtype=np.float64) for c in pair)
    t = ((np.arange(h) + 0.5) / h)[:, None, None]
    img = np.broadcast_to((1 - t) * top + t * bottom, (h, w, 3)).copy()
    if style.texture != "none" and style.texture_amplitude > 0:
        yy, xx = np.mgrid[0:h, 0:w]
        if style.texture == "stripes":
            wave = np.sin(2 * np.pi * (xx + yy) / style.texture_period)
        elif style.texture == "checker":
            wave = np.sign(np.sin(np.pi * xx / style.texture_period * 2)
                           * np.sin(np.pi * yy / style.texture_period * 2))
        else:
            raise ValueError(f"unknown texture {style.texture!r}")
        img += style.texture_amplitude * wave[..., None]
    for obj, cov in zip(objects, coverages):
        color = np.asarray(style.palette[obj.palette_index % len(style.palette)])
        img = img * (1 - cov[..., None]) + color * cov[..., None]
        if style.outline > 0:
            rim = _outline(cov)[..., None] * style.outline
            img = img * (1 - rim)
    img += style.noise * noise_field
    return img


def blend_styles(objects, coverages, domain, resolution, noise_field, background_index=0):
    """``(1 - beta) * source + beta * target`` rendering, before clipping and the cue."""
    img = (1 - domain.beta) * render_style(objects, coverages, domain.source_style, resolution,
                                           noise_field, background_index)
    if domain.beta > 0:
        img = img + domain.beta * render_style(objects, coverages, domain.target_style, resolution,
                                               noise_field, background_index)
    return img


def class_tile(class_id):
    """4x4 ``+-1`` pattern unique to a class, anchored to image coordinates.

    Two-pixel stripes (vertical, horizontal) and a 2x2 checker: period 4,
    so the stride-2 first layer still resolves them.
    """
    yy, xx = np.mgrid[0:4, 0:4]
    if class_id == 0:
        return np.where((xx // 2) % 2 == 0, 1.0, -1.0)
    if class_id == 1:
        return np.where((yy // 2) % 2 == 0, 1.0, -1.0)
    if class_id == 2:
        return np.where((xx // 2 + yy // 2) % 2 == 0, 1.0, -1.0)
    rng = np.random.default_rng(1000 + class_id)
    return rng.choice([-1.0, 1.0], size=(4, 4))


def box_pixels(box, resolution):
    """Slices of pixels whose centers fall inside a normalized box."""
    h, w = resolution
    cx, cy, bw, bh = box
    x0 = int(np.ceil((cx - bw / 2) * w - 0.5))
    x1 = int(np.floor((cx + bw / 2) * w - 0.5))
    y0 = int(np.ceil((cy - bh / 2) * h - 0.5))
    y1 = int(np.floor((cy + bh / 2) * h - 0.5))
    return slice(max(y0, 0), min(y1, h - 1) + 1), slice(max(x0, 0), min(x1, w - 1) + 1)


def inject_nonrobust_cue(sample, domain, rng, num_classes=3):
    """Add a box-local class tile of amplitude ``domain.nonrobust_amplitude``.

    With ``nonrobust_present`` the tile matches the object's class (with
    probability ``cue_fidelity``); otherwise a uniformly random class tile is
    used so pixel statistics stay the same. Later objects overwrite earlier
    ones where boxes overlap, so no pixel moves by more than the amplitude.
    """
    amp = domain.nonrobust_amplitude
    h, w = sample.image.shape[:2]
    cue = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    planted = []
    for lab in sample.labels:
        tile_class = lab.class_id
        if not domain.nonrobust_present or rng.random() >= domain.cue_fidelity:
            tile_class = int(rng.integers(num_classes))
        planted.append(tile_class)
        tile = class_tile(tile_class)
        ys, xs = box_pixels(lab.box, (h, w))
        cue[ys, xs] = amp * tile[yy[ys, xs] % 4, xx[ys, xs] % 4]
    image = np.clip(sample.image + cue[..., None], 0.0, 1.0)
    return AnnotatedSample(image, list(sample.labels), sample.domain_tag, planted)


def render_scene(scene, domain, rng, domain_tag=None):
    """Render one labeled scene: geometry, blended style, then the cue.

    Pixel values are quantized to 8 bits so that in-memory samples equal
    what is written to disk.
    """
    src, tgt = domain.source_style, domain.target_style
    palette_size = min(len(src.palette), len(tgt.palette))
    bg = int(rng.integers(min(len(src.backgrounds), len(tgt.backgrounds))))
    objects = place_objects(scene, rng, palette_size)
    coverages = [shape_coverage(o, scene.resolution) for o in objects]
    noise = rng.uniform(-1.0, 1.0, size=scene.resolution + (3,))
    img = np.clip(blend_styles(objects, coverages, domain, scene.resolution, noise, bg), 0.0, 1.0)
    labels = [BoxLabel(o.class_id, o.cx, o.cy, o.size, o.size) for o in objects]
    tag = domain_tag or ("source" if domain.beta == 0 and domain.nonrobust_present else "target")
    sample = AnnotatedSample(img, labels, tag)
    sample = inject_nonrobust_cue(sample, domain, rng, scene.num_classes)
    sample.image = quantize(sample.image)
    return sample


def quantize(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray
    labels: list
    domain_tag: str = "source"
    manifest: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def sample(self, i):
        return AnnotatedSample(self.images[i], self.labels[i], self.domain_tag)

    def samples(self):
        return [self.sample(i) for i in range(len(self))]

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.domain_tag, dict(self.manifest),
                       self.files[:n])


def _spec_dict(scene, domain):
    return {"scene": asdict(scene), "domain": asdict(domain)}


def build_dataset(scene, domain, n, seed, domain_tag=None):
    """Render ``n`` samples in memory; sample ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = [render_scene(scene, domain, sample_rng(seed, i), domain_tag) for i in range(n)]
    images = np.stack([s.image for s in samples])
    labels = [s.labels for s in samples]
    tag = samples[0].domain_tag
    ds = Dataset(images, labels, tag, {"seed": seed, "count": n, **_spec_dict(scene, domain)})
    ds.files = [f"images/{i:06d}.ppm" for i in range(n)]
    ds.manifest["content_hash"] = content_hash(ds)
    return ds


def content_hash(ds):
    h = hashlib.sha256()
    for img in ds.images:
        h.update(np.round(img * 255).astype(np.uint8).tobytes())
    h.update(json.dumps(labels_json(ds), sort_keys=True).encode())
    return h.hexdigest()


def labels_json(ds):
    files = ds.files or [f"images/{i:06d}.ppm" for i in range(len(ds))]
    return [
        {"file": f, "boxes": [lab.to_dict() for lab in labs]}
        for f, labs in zip(files, ds.labels)
    ]


def write_dataset(ds, out_dir):
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if not ds.files:
        ds.files = [f"images/{i:06d}.ppm" for i in range(len(ds))]
    for f, img in zip(ds.files, ds.images):
        write_ppm(out / f, img)
    with open(out / "labels.json", "w") as fh:
        json.dump(labels_json(ds), fh, indent=1, sort_keys=True)
        fh.write("\n")
    manifest = dict(ds.manifest)
    manifest.setdefault("content_hash", content_hash(ds))
    manifest["domain_tag"] = ds.domain_tag
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def generate_dataset(scene, domain, n, seed, out_dir=None, domain_tag=None):
    """Render ``n`` samples and, if ``out_dir`` is given, write PPMs plus JSON."""
    ds = build_dataset(scene, domain, n, seed, domain_tag)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def load_dataset(path, domain_tag=None):
    """Read ``labels.json`` plus the PPM images it references.

    Works for generated datasets and for user-supplied ones following the
    same label schema (a manifest is optional).
    """
    root = Path(path)
    labels_path = root / "labels.json"
    if not labels_path.exists():
        raise FileNotFoundError(f"no labels.json in {root}")
    with open(labels_path) as fh:
        entries = json.load(fh)
    manifest = {}
    if (root / "manifest.json").exists():
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
    files, images, labels = [], [], []
    for entry in entries:
        files.append(entry["file"])
        images.append(read_ppm(root / entry["file"]))
        labels.append([BoxLabel.from_dict(b) for b in entry["boxes"]])
    if images:
        images = np.stack(images)
    else:
        images = np.zeros((0, 0, 0, 3))
    tag = domain_tag or manifest.get("domain_tag", "source")
    return Dataset(images, labels, tag, manifest, files)


def scene_from_dict(d):
    d = dict(d)
    for key in ("objects_per_image", "size_range", "resolution"):
        if key in d:
            d[key] = tuple(d[key])
    return SceneSpec(**d)


def style_from_dict(d):
    d = dict(d)
    d["palette"] = tuple(tuple(c) for c in d["palette"])
    d["backgrounds"] = tuple(tuple(tuple(c) for c in pair) for pair in d["backgrounds"])
    return Style(**d)


def domain_from_dict(d):
    d = dict(d)
    for key in ("source_style", "target_style"):
        if key in d and isinstance(d[key], dict):
            d[key] = style_from_dict(d[key])
    return DomainSpec(**d)


def stylized(domain, beta):
    """Same domain at a different shift strength."""
    return replace(domain, beta=beta)
