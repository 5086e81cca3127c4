"""Procedural "glyph face" scenes with boxes, 5-point landmarks and binary attributes.

A face lives in a local frame ``(u, v)`` spanning the unit square, rotated by
``theta`` and scaled by ``size`` pixels. The five landmarks sit at the
corners and center of the inner 62.5% square, so a landmark box with the
default 0.3 margin coincides with the glyph's extent. Every attribute owns
a zone of the local frame that nothing else inks, which keeps each bit
recoverable from pixels (see :func:`decode_attributes`).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .boxes import BBox
from .errors import ConfigInfeasible, DegenerateLandmarks

ATTRIBUTES = (
    "eyeglasses", "smiling", "hat", "big_nose",
    "mustache", "earrings", "rosy_cheeks", "sideburns",
)

# landmark positions in the local frame: left eye, right eye, nose, left / right mouth corner
LANDMARKS_LOCAL = np.array([
    [-0.3125, -0.3125], [0.3125, -0.3125], [0.0, 0.0], [-0.3125, 0.3125], [0.3125, 0.3125],
])
HFLIP_LANDMARK_ORDER = [1, 0, 2, 4, 3]

# probe points per attribute: inked only when the bit is +1
PROBES = {
    "eyeglasses": [(0.0, -0.3125)],
    "smiling": [(0.0, 0.43)],
    "hat": [(-0.2, -0.465), (0.2, -0.465)],
    "big_nose": [(-0.085, 0.0), (0.085, 0.0)],
    "mustache": [(-0.12, 0.20), (0.12, 0.20)],
    "earrings": [(-0.46, 0.06), (0.46, 0.06)],
    "rosy_cheeks": [(-0.26, 0.06), (0.26, 0.06)],
    "sideburns": [(-0.45, 0.38), (0.45, 0.38)],
}

STYLES = {
    # background level, face fill (None = no fill), ink level, clutter ink range
    "line": dict(background=0.10, fill=None, ink=0.85, clutter=(0.45, 0.85)),
    "fill": dict(background=0.30, fill=0.70, ink=0.05, clutter=(0.50, 0.90)),
}


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    faces_min: int = 0
    faces_max: int = 2
    face_size_min: float = 20.0
    face_size_max: float = 28.0
    max_rotation_deg: float = 8.0
    attributes: tuple = ATTRIBUTES
    attr_prob: float = 0.5
    clutter_density: float = 3.0
    occlusion_prob: float = 0.0
    noise_std: float = 0.04
    style: str = "line"
    margin: float = 0.3
    supersample: int = 3

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))

    @property
    def num_attributes(self) -> int:
        return len(self.attributes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attributes"] = list(self.attributes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "attributes" in d:
            d["attributes"] = tuple(d["attributes"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Face:
    box: BBox
    landmarks: np.ndarray          # (5, 2) x, y
    attrs: np.ndarray              # (M,) in {+1, -1}


@dataclass
class SceneRecord:
    image: np.ndarray              # (1, H, W) float32 in [0, 1]
    faces: list
    seed: int
    record_id: int = 0

    @property
    def boxes(self) -> list:
        return [f.box for f in self.faces]

    @property
    def attr_matrix(self) -> np.ndarray:
        m = len(self.faces[0].attrs) if self.faces else 0
        return np.array([f.attrs for f in self.faces], dtype=np.int64).reshape(len(self.faces), m)


@dataclass
class FaceLayout:
    center: tuple
    size: float
    theta: float
    attrs: np.ndarray


@dataclass
class SceneLayout:
    """Everything sampled for a scene; rendering is a pure function of it."""
    config: GenConfig
    seed: int
    faces: list
    clutter: list
    occluders: list
    noise: np.ndarray
    extra: dict = field(default_factory=dict)


def _check_feasible(cfg: GenConfig):
    if cfg.style not in STYLES:
        raise ConfigInfeasible(f"unknown glyph style {cfg.style!r}; have {sorted(STYLES)}")
    if not 0 <= cfg.faces_min <= cfg.faces_max:
        raise ConfigInfeasible(f"bad face count range [{cfg.faces_min}, {cfg.faces_max}]")
    if cfg.face_size_min <= 0 or cfg.face_size_max < cfg.face_size_min:
        raise ConfigInfeasible("bad face size range")
    theta = math.radians(cfg.max_rotation_deg)
    factor = math.cos(theta) + math.sin(theta)
    extent = cfg.face_size_max * factor + 2
    if extent > cfg.image_size:
        raise ConfigInfeasible(f"a face of extent {extent:.1f}px cannot fit a {cfg.image_size}px image")
    smallest = cfg.face_size_min * factor + 2
    if cfg.faces_max * smallest > cfg.image_size + 2:
        raise ConfigInfeasible(f"{cfg.faces_max} faces of extent {smallest:.1f}px cannot fit side by side")
    unknown = set(cfg.attributes) - set(PROBES)
    if unknown:
        raise ConfigInfeasible(f"no renderer for attributes {sorted(unknown)}")


def face_landmarks(center, size: float, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(center, dtype=np.float64) + size * LANDMARKS_LOCAL @ rot.T


def bbox_from_landmarks(landmarks, margin: float = 0.3, image_size=None) -> BBox:
    """Axis-aligned hull of the points, grown by ``margin`` times its size on each side."""
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise DegenerateLandmarks("need at least two landmarks")
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        raise DegenerateLandmarks(f"landmarks span a degenerate hull {w}x{h}")
    x1, x2 = x1 - margin * w, x2 + margin * w
    y1, y2 = y1 - margin * h, y2 + margin * h
    if image_size is not None:
        iw, ih = (image_size, image_size) if np.isscalar(image_size) else image_size
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, float(iw)), min(y2, float(ih))
    return BBox(float(x1), float(y1), float(x2), float(y2))


def _extent_box(center, size, theta):
    half = 0.5 * size * (abs(math.cos(theta)) + abs(math.sin(theta)))
    return (center[0] - half, center[1] - half, center[0] + half, center[1] + half)


def _overlaps(a, b, gap):
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def sample_layout(seed: int, cfg: GenConfig) -> SceneLayout:
    """Draw a scene layout; random draws happen in a fixed order independent of attribute values."""
    _check_feasible(cfg)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.faces_min, cfg.faces_max + 1))
    size = cfg.image_size
    faces, boxes = [], []
    for _ in range(n):
        attrs = np.where(rng.random(cfg.num_attributes) < cfg.attr_prob, 1, -1).astype(np.int64)
        for _try in range(200):
            s = float(rng.uniform(cfg.face_size_min, cfg.face_size_max))
            theta = math.radians(float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)))
            half = 0.5 * s * (abs(math.cos(theta)) + abs(math.sin(theta)))
            cx = float(rng.uniform(half + 1, size - half - 1))
            cy = float(rng.uniform(half + 1, size - half - 1))
            ext = _extent_box((cx, cy), s, theta)
            if all(not _overlaps(ext, b, 2.0) for b in boxes):
                faces.append(FaceLayout((cx, cy), s, theta, attrs))
                boxes.append(ext)
                break

    clutter = []
    n_clutter = int(rng.poisson(cfg.clutter_density))
    lo, hi = STYLES[cfg.style]["clutter"]
    for _ in range(n_clutter):
        kind = int(rng.integers(0, 4))
        r = float(rng.uniform(3.0, 9.0))
        cx, cy = (float(v) for v in rng.uniform(r, size - r, 2))
        ink = float(rng.uniform(lo, hi))
        angle = float(rng.uniform(0, math.pi))
        ext = (cx - r, cy - r, cx + r, cy + r)
        if any(_overlaps(ext, b, 1.0) for b in boxes):
            continue
        clutter.append((kind, cx, cy, r, ink, angle))

    occluders = []
    for f in faces:
        hit = rng.random() < cfg.occlusion_prob
        ox, oy, ow, oh = (float(v) for v in rng.uniform(0, 1, 4))
        if hit:
            half = 0.5 * f.size
            w, h = (0.25 + 0.25 * ow) * f.size, (0.25 + 0.25 * oh) * f.size
            x = f.center[0] - half + ox * (f.size - w)
            y = f.center[1] - half + oy * (f.size - h)
            occluders.append((x, y, x + w, y + h))

    noise = rng.standard_normal((size, size)) * cfg.noise_std
    return SceneLayout(cfg, int(seed), faces, clutter, occluders, noise)


# ---------------------------------------------------------------------------
# rendering

def _seg_dist(u, v, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = np.clip(((u - ax) * dx + (v - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(u - (ax + t * dx), v - (ay + t * dy))


def _rect(u, v, u0, u1, v0, v1):
    return (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)


def _disk(u, v, cu, cv, r):
    return (u - cu) ** 2 + (v - cv) ** 2 <= r * r


def _glyph_layers(u, v, attrs: dict):
    """Boolean ink masks in the local frame, one per drawn element."""
    eyes = _disk(u, v, -0.3125, -0.3125, 0.065) | _disk(u, v, 0.3125, -0.3125, 0.065)
    nose_r = 0.12 if attrs.get("big_nose", -1) > 0 else 0.045
    ink = eyes | _disk(u, v, 0.0, 0.0, nose_r)
    mid = (0.0, 0.43) if attrs.get("smiling", -1) > 0 else (0.0, 0.3125)
    mouth = (_seg_dist(u, v, (-0.3125, 0.3125), mid) <= 0.03) | (_seg_dist(u, v, mid, (0.3125, 0.3125)) <= 0.03)
    ink |= mouth
    if attrs.get("eyeglasses", -1) > 0:
        ink |= _rect(u, v, -0.25, 0.25, -0.345, -0.28)
    if attrs.get("hat", -1) > 0:
        ink |= _rect(u, v, -0.40, 0.40, -0.5, -0.43)
    if attrs.get("mustache", -1) > 0:
        ink |= _rect(u, v, -0.20, 0.20, 0.17, 0.23)
    if attrs.get("earrings", -1) > 0:
        ink |= _rect(u, v, 0.42, 0.5, 0.0, 0.12) | _rect(u, v, -0.5, -0.42, 0.0, 0.12)
    if attrs.get("rosy_cheeks", -1) > 0:
        ink |= _disk(u, v, -0.26, 0.06, 0.07) | _disk(u, v, 0.26, 0.06, 0.07)
    if attrs.get("sideburns", -1) > 0:
        ink |= _rect(u, v, 0.40, 0.5, 0.25, 0.5) | _rect(u, v, -0.5, -0.40, 0.25, 0.5)
    return ink


def _sample_grid(x0, y0, x1, y1, ss):
    xs = np.arange(x0, x1)
    ys = np.arange(y0, y1)
    off = (np.arange(ss) + 0.5) / ss
    px = (xs[:, None] + off[None, :]).reshape(-1)
    py = (ys[:, None] + off[None, :]).reshape(-1)
    return np.meshgrid(px, py)   # (H*ss, W*ss) grids, row = y


def _coverage(mask, ss):
    h, w = mask.shape[0] // ss, mask.shape[1] // ss
    return mask.reshape(h, ss, w, ss).mean(axis=(1, 3))


def _paint(img, x0, y0, cov, level):
    h, w = cov.shape
    region = img[y0:y0 + h, x0:x0 + w]
    region *= 1.0 - cov
    region += cov * level


def _render_face(img, face: FaceLayout, box: BBox, names, style, ss):
    size = img.shape[0]
    x0, y0 = max(int(math.floor(box.x1)), 0), max(int(math.floor(box.y1)), 0)
    x1, y1 = min(int(math.ceil(box.x2)), size), min(int(math.ceil(box.y2)), size)
    px, py = _sample_grid(x0, y0, x1, y1, ss)
    inside = (px >= box.x1) & (px < box.x2) & (py >= box.y1) & (py < box.y2)
    c, s = math.cos(face.theta), math.sin(face.theta)
    dx, dy = px - face.center[0], py - face.center[1]
    u = (c * dx + s * dy) / face.size
    v = (-s * dx + c * dy) / face.size
    attrs = dict(zip(names, face.attrs.tolist()))
    if style["fill"] is not None:
        fill = inside & (np.maximum(np.abs(u), np.abs(v)) <= 0.49)
        _paint(img, x0, y0, _coverage(fill, ss), style["fill"])
    ink = inside & _glyph_layers(u, v, attrs)
    _paint(img, x0, y0, _coverage(ink, ss), style["ink"])


def _render_clutter(img, item, ss):
    kind, cx, cy, r, ink, angle = item
    size = img.shape[0]
    x0, y0 = max(int(math.floor(cx - r)), 0), max(int(math.floor(cy - r)), 0)
    x1, y1 = min(int(math.ceil(cx + r)), size), min(int(math.ceil(cy + r)), size)
    px, py = _sample_grid(x0, y0, x1, y1, ss)
    u, v = (px - cx) / r, (py - cy) / r
    if kind == 0:      # ring
        m = np.abs(np.hypot(u, v) - 0.8) <= 0.12
    elif kind == 1:    # square frame
        m = np.abs(np.maximum(np.abs(u), np.abs(v)) - 0.8) <= 0.12
    elif kind == 2:    # bar
        ca, sa = math.cos(angle), math.sin(angle)
        m = _seg_dist(u, v, (-0.9 * ca, -0.9 * sa), (0.9 * ca, 0.9 * sa)) <= 0.12
    else:              # an eye pair with nothing else
        m = _disk(u, v, -0.5, 0.0, 0.22) | _disk(u, v, 0.5, 0.0, 0.22)
    _paint(img, x0, y0, _coverage(m, ss), ink)


def render_scene(layout: SceneLayout, record_id: int = 0) -> SceneRecord:
    cfg = layout.config
    style = STYLES[cfg.style]
    size = cfg.image_size
    img = np.full((size, size), style["background"], dtype=np.float64)
    for item in layout.clutter:
        _render_clutter(img, item, cfg.supersample)
    faces = []
    for f in layout.faces:
        lm = face_landmarks(f.center, f.size, f.theta)
        box = bbox_from_landmarks(lm, cfg.margin, size)
        _render_face(img, f, box, cfg.attributes, style, cfg.supersample)
        faces.append(Face(box, lm, f.attrs.copy()))
    for x1, y1, x2, y2 in layout.occluders:
        xa, ya = max(int(round(x1)), 0), max(int(round(y1)), 0)
        xb, yb = min(int(round(x2)), size), min(int(round(y2)), size)
        img[ya:yb, xa:xb] = style["background"]
    img = np.clip(img + layout.noise, 0.0, 1.0)
    return SceneRecord(img[None].astype(np.float32), faces, layout.seed, record_id)


def generate_scene(seed: int, config: GenConfig | None = None, record_id: int = 0) -> SceneRecord:
    """Render the scene for ``seed``; identical inputs give bit-identical records."""
    return render_scene(sample_layout(seed, config or GenConfig()), record_id)


def record_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, dtype=np.uint32)[0])


def split_of(index: int, count: int, fractions=(0.8, 0.1, 0.1)) -> str:
    """Contiguous index ranges: the first 80% train, next 10% val, rest test."""
    n_train = int(round(count * fractions[0]))
    n_val = int(round(count * fractions[1]))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def generate_dataset(master_seed: int, count: int, config: GenConfig | None = None):
    """Yield ``count`` records whose seeds derive from ``master_seed``."""
    cfg = config or GenConfig()
    for i in range(count):
        yield generate_scene(record_seed(master_seed, i), cfg, record_id=i)


def hflip_record(rec: SceneRecord) -> SceneRecord:
    """Mirror a record left-right (all attributes are mirror-symmetric)."""
    w = rec.image.shape[-1]
    faces = []
    for f in rec.faces:
        lm = f.landmarks[HFLIP_LANDMARK_ORDER].copy()
        lm[:, 0] = w - lm[:, 0]
        faces.append(Face(f.box.hflip(w), lm, f.attrs.copy()))
    return SceneRecord(np.ascontiguousarray(rec.image[..., ::-1]), faces, rec.seed, rec.record_id)


# ---------------------------------------------------------------------------
# rule-based attribute decoder

def face_geometry(landmarks) -> tuple:
    """Recover ``(center, size, theta)`` from the five landmarks."""
    lm = np.asarray(landmarks, dtype=np.float64)
    eye_vec = lm[1] - lm[0]
    size = float(np.hypot(*eye_vec)) / (LANDMARKS_LOCAL[1, 0] - LANDMARKS_LOCAL[0, 0])
    theta = math.atan2(eye_vec[1], eye_vec[0])
    return (float(lm[2, 0]), float(lm[2, 1])), size, theta


def _bilinear(img2d, x, y):
    h, w = img2d.shape
    x = min(max(x - 0.5, 0.0), w - 1.0)
    y = min(max(y - 0.5, 0.0), h - 1.0)
    xa, ya = int(math.floor(x)), int(math.floor(y))
    xb, yb = min(xa + 1, w - 1), min(ya + 1, h - 1)
    fx, fy = x - xa, y - ya
    top = img2d[ya, xa] * (1 - fx) + img2d[ya, xb] * fx
    bot = img2d[yb, xa] * (1 - fx) + img2d[yb, xb] * fx
    return top * (1 - fy) + bot * fy


def decode_attributes(image, landmarks, names=ATTRIBUTES, style: str = "line") -> np.ndarray:
    """Read each attribute bit from pixels at its probe points (no learning)."""
    img = np.asarray(image, dtype=np.float64)
    img = img[0] if img.ndim == 3 else img
    center, size, theta = face_geometry(landmarks)
    c, s = math.cos(theta), math.sin(theta)
    st = STYLES[style]
    base = st["fill"] if st["fill"] is not None else st["background"]
    mid = 0.5 * (base + st["ink"])
    out = []
    for name in names:
        vals = []
        for u, v in PROBES[name]:
            x = center[0] + size * (c * u - s * v)
            y = center[1] + size * (s * u + c * v)
            vals.append(_bilinear(img, x, y))
        inked = np.mean(vals) > mid if st["ink"] > base else np.mean(vals) < mid
        out.append(1 if inked else -1)
    return np.array(out, dtype=np.int64)


def with_attrs(layout: SceneLayout, face_index: int, attrs) -> SceneLayout:
    faces = list(layout.faces)
    faces[face_index] = replace(faces[face_index], attrs=np.asarray(attrs, dtype=np.int64))
    return replace(layout, faces=faces)
