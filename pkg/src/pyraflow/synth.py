"""Synthetic articulated-figure image pairs with exact ground-truth flow.

A figure is a kinematic tree of ten rigid capsules (torso, head, arms, legs)
drawn over a procedurally textured background. Textures live in each
segment's local frame, so every figure pixel has a known rigid
correspondence between the two frames and the flow is exact.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import flowio
from .errors import ConfigError, FormatError
from .tensor import DTYPE

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
BACKGROUND = -1
_BG_BYTE = 255

SEGMENTS = (
    "torso", "head",
    "upper_arm_l", "forearm_l", "upper_arm_r", "forearm_r",
    "thigh_l", "shin_l", "thigh_r", "shin_r",
)


@dataclass(frozen=True)
class Skeleton:
    """Capsule segments as a kinematic tree rooted at the torso (index 0).

    Each segment's local frame has its origin at the joint with its parent
    and its +x axis along the bone; the capsule covers every point within
    ``half_width`` of the bone from x=0 to x=``length``.
    """

    parent: tuple[int, ...]
    attach: tuple[tuple[float, float], ...]  # joint position in parent-local coords
    length: tuple[float, ...]
    half_width: tuple[float, ...]
    z: tuple[int, ...]  # draw order, higher overwrites

    def __post_init__(self):
        n = len(self.parent)
        if not all(len(a) == n for a in (self.attach, self.length, self.half_width, self.z)):
            raise ConfigError("skeleton fields must all have one entry per segment")
        if self.parent[0] != -1 or any(p == -1 for p in self.parent[1:]):
            raise ConfigError("segment 0 must be the unique root")
        if any(not 0 <= p < i for i, p in enumerate(self.parent[1:], start=1)):
            raise ConfigError("parents must precede children (acyclic tree)")
        if min(self.length) <= 0 or min(self.half_width) <= 0:
            raise ConfigError("segment lengths and half-widths must be positive")
        if sorted(self.z) != list(range(n)):
            raise ConfigError("draw orders must be a permutation of 0..n-1")

    @property
    def n(self) -> int:
        return len(self.parent)

    def children(self, s: int) -> list[int]:
        return [i for i, p in enumerate(self.parent) if p == s]

    def depth(self, s: int) -> int:
        d = 0
        while self.parent[s] >= 0:
            s = self.parent[s]
            d += 1
        return d


def default_skeleton(scale: float = 1.0) -> Skeleton:
    """A ~50 px tall figure at scale 1 (sized for 64x64 frames)."""
    s = scale
    return Skeleton(
        parent=(-1, 0, 0, 2, 0, 4, 0, 6, 0, 8),
        attach=(
            (0.0, 0.0), (17 * s, 0.0),
            (15 * s, -4.5 * s), (10 * s, 0.0), (15 * s, 4.5 * s), (10 * s, 0.0),
            (0.0, -3 * s), (12 * s, 0.0), (0.0, 3 * s), (12 * s, 0.0),
        ),
        length=(18 * s, 6 * s, 10 * s, 9 * s, 10 * s, 9 * s, 12 * s, 11 * s, 12 * s, 11 * s),
        half_width=(5 * s, 4 * s, 2.5 * s, 2 * s, 2.5 * s, 2 * s, 3 * s, 2.5 * s, 3 * s, 2.5 * s),
        z=(4, 5, 1, 0, 8, 9, 3, 2, 6, 7),
    )


# joint-angle ranges (radians, relative to the parent bone) per segment; the
# torso entry bounds the root orientation instead (image y points down)
DEFAULT_RANGES = (
    (-math.pi / 2 - 0.35, -math.pi / 2 + 0.35),
    (-0.4, 0.4),
    (-2.9, -0.6), (-1.6, 0.0), (0.6, 2.9), (0.0, 1.6),
    (math.pi - 0.2, math.pi + 0.6), (-1.3, 0.0), (math.pi - 0.6, math.pi + 0.2), (0.0, 1.3),
)

DEFAULT_COLORS = (
    (0.85, 0.30, 0.25), (0.95, 0.80, 0.60),
    (0.25, 0.45, 0.85), (0.90, 0.70, 0.30), (0.30, 0.75, 0.40), (0.80, 0.40, 0.80),
    (0.35, 0.30, 0.70), (0.20, 0.65, 0.70), (0.75, 0.55, 0.20), (0.55, 0.25, 0.45),
)


@dataclass
class GenConfig:
    height: int = 64
    width: int = 64
    count: int = 100
    seed: int = 0
    mode: str = "articulated"  # or "translation": background only, rigid shift
    joint_ranges: list | None = None  # None -> DEFAULT_RANGES
    max_joint_delta: float = 0.15
    max_root_rotation: float = 0.15
    max_root_motion: float = 4.0
    bg_motion: float = 2.0
    root_region: tuple[float, float, float, float] = (0.35, 0.65, 0.50, 0.68)  # x0, x1, y0, y1 fractions
    figure_scale: float = 1.0
    octaves: int = 3
    base_period: float = 16.0
    segment_colors: list | None = None  # None -> DEFAULT_COLORS

    def ranges(self) -> np.ndarray:
        return np.array(self.joint_ranges if self.joint_ranges is not None else DEFAULT_RANGES, dtype=np.float64)

    def colors(self) -> np.ndarray:
        return np.array(self.segment_colors if self.segment_colors is not None else DEFAULT_COLORS, dtype=np.float64)

    def skeleton(self) -> Skeleton:
        return default_skeleton(self.figure_scale)

    def validate(self) -> "GenConfig":
        if self.height < 4 or self.width < 4:
            raise ConfigError("resolution must be at least 4x4")
        if self.count < 0:
            raise ConfigError("count must be >= 0")
        if not 0 <= self.seed < 2**63:
            raise ConfigError("seed must be a non-negative 63-bit integer")
        if self.mode not in ("articulated", "translation"):
            raise ConfigError(f"unknown generation mode {self.mode!r}")
        for name in ("max_joint_delta", "max_root_rotation", "max_root_motion", "bg_motion"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.octaves < 1 or self.base_period <= 0:
            raise ConfigError("texture needs >= 1 octave and a positive base period")
        skel = self.skeleton()
        ranges = self.ranges()
        if ranges.shape != (skel.n, 2) or np.any(ranges[:, 0] > ranges[:, 1]):
            raise ConfigError(f"joint_ranges must be {skel.n} (lo, hi) pairs with lo <= hi")
        colors = self.colors()
        if colors.shape != (skel.n, 3) or colors.min() < 0 or colors.max() > 1:
            raise ConfigError(f"segment_colors must be {skel.n} RGB triples in [0, 1]")
        x0, x1, y0, y1 = self.root_region
        if not (0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1):
            raise ConfigError("root_region fractions must be ordered within [0, 1]")
        bound = displacement_bound(self)
        if bound > self.width / 4:
            raise ConfigError(
                f"configured motion allows {bound:.2f} px displacement, more than W/4 = {self.width / 4:g}"
            )
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["root_region"] = list(self.root_region)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown gen config keys: {sorted(unknown)}")
        data = dict(data)
        if "root_region" in data:
            data["root_region"] = tuple(data["root_region"])
        return cls(**data)


@dataclass
class Pose:
    root: np.ndarray  # (x, y) pixels
    orientation: float  # torso bone direction, radians
    angles: np.ndarray  # per-segment angle relative to parent; entry 0 unused

    def copy(self) -> "Pose":
        return Pose(self.root.copy(), float(self.orientation), self.angles.copy())


@dataclass
class Sample:
    image1: np.ndarray  # (3, H, W) in [0, 1]
    image2: np.ndarray
    gt_flow: np.ndarray  # (2, H, W)
    valid_mask: np.ndarray  # (1, H, W) of 0/1
    segment_map: np.ndarray  # (H, W) int, -1 = background
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# kinematics


def segment_transforms(pose: Pose, skel: Skeleton) -> list[tuple[np.ndarray, np.ndarray]]:
    """World (rotation, translation) of every segment's local frame."""
    out: list[tuple[np.ndarray, np.ndarray]] = []
    for s in range(skel.n):
        if s == 0:
            theta, origin = pose.orientation, np.asarray(pose.root, np.float64)
            rot = _rot(theta)
        else:
            prot, porigin = out[skel.parent[s]]
            origin = porigin + prot @ np.asarray(skel.attach[s], np.float64)
            rot = prot @ _rot(pose.angles[s])
        out.append((rot, origin))
    return out


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _reach(skel: Skeleton, s: int) -> float:
    """Upper bound on distance from segment s's joint to any point of its subtree."""
    best = skel.length[s] + skel.half_width[s]
    for c in skel.children(s):
        best = max(best, math.hypot(*skel.attach[c]) + _reach(skel, c))
    return best


def displacement_bound(cfg: GenConfig) -> float:
    """Largest ground-truth displacement the configured motion ranges permit."""
    if cfg.mode == "translation":
        return cfg.bg_motion
    skel = cfg.skeleton()

    def chain(s: int) -> float:
        # each joint's rotation change moves its subtree by at most delta * reach
        here = cfg.max_joint_delta * _reach(skel, s)
        return here + max((chain(c) for c in skel.children(s)), default=0.0)

    figure = cfg.max_root_motion + cfg.max_root_rotation * _reach(skel, 0)
    figure += max((chain(c) for c in skel.children(0)), default=0.0)
    return max(figure, cfg.bg_motion)


def sample_pose_pair(rng: np.random.Generator, skel: Skeleton, cfg: GenConfig) -> tuple[Pose, Pose]:
    """Pose 1 uniform within the joint ranges; pose 2 a bounded perturbation of it."""
    ranges = cfg.ranges()
    x0, x1, y0, y1 = cfg.root_region
    root = np.array([rng.uniform(x0, x1) * (cfg.width - 1), rng.uniform(y0, y1) * (cfg.height - 1)])
    draw = rng.uniform(ranges[:, 0], ranges[:, 1])
    angles = draw.copy()
    angles[0] = 0.0
    pose1 = Pose(root, float(draw[0]), angles)

    r = cfg.max_root_motion * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    d_root = np.array([r * math.cos(phi), r * math.sin(phi)])
    d_orient = rng.uniform(-1, 1) * cfg.max_root_rotation
    d_angles = rng.uniform(-1, 1, skel.n) * cfg.max_joint_delta
    angles2 = np.clip(angles + d_angles, ranges[:, 0], ranges[:, 1])
    angles2[0] = 0.0
    orient2 = float(np.clip(pose1.orientation + d_orient, ranges[0, 0], ranges[0, 1]))
    return pose1, Pose(root + d_root, orient2, angles2)


# ---------------------------------------------------------------------------
# textures and rendering


def _smooth(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


class ValueNoise:
    """Seeded fractal value noise on a periodic lattice."""

    PERIOD = 64

    def __init__(self, rng: np.random.Generator, octaves: int, base_period: float, channels: int = 1):
        self.tables = rng.uniform(-1, 1, size=(octaves, channels, self.PERIOD, self.PERIOD))
        self.freqs = [2.0**o / base_period for o in range(octaves)]
        self.amps = [0.5**o for o in range(octaves)]
        self.norm = sum(self.amps)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Noise in [-1, 1] at real coordinates; returns (channels,) + x.shape."""
        total = 0.0
        p = self.PERIOD
        for table, freq, amp in zip(self.tables, self.freqs, self.amps):
            u, v = x * freq, y * freq
            iu, iv = np.floor(u), np.floor(v)
            fu, fv = _smooth(u - iu), _smooth(v - iv)
            i0 = iu.astype(np.int64) % p
            j0 = iv.astype(np.int64) % p
            i1, j1 = (i0 + 1) % p, (j0 + 1) % p
            top = table[:, j0, i0] + fu * (table[:, j0, i1] - table[:, j0, i0])
            bot = table[:, j1, i0] + fu * (table[:, j1, i1] - table[:, j1, i0])
            total = total + amp * (top + fv * (bot - top))
        return total / self.norm


@dataclass
class Textures:
    background: ValueNoise
    figure: ValueNoise
    colors: np.ndarray  # (segments, 3)
    offsets: np.ndarray  # (segments, 2) per-segment shift into the figure texture

    @classmethod
    def random(cls, rng: np.random.Generator, cfg: GenConfig) -> "Textures":
        skel_n = cfg.colors().shape[0]
        bg = ValueNoise(rng, cfg.octaves, cfg.base_period, channels=3)
        fig = ValueNoise(rng, cfg.octaves, cfg.base_period / 2, channels=1)
        offsets = rng.uniform(0, ValueNoise.PERIOD * cfg.base_period, size=(skel_n, 2))
        return cls(bg, fig, cfg.colors(), offsets)

    def background_rgb(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return 0.5 + 0.45 * self.background(x, y)

    def segment_rgb(self, s: int, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
        shade = 0.6 + 0.4 * self.figure(lx + self.offsets[s, 0], ly + self.offsets[s, 1])[0]
        return self.colors[s][:, None] * shade[None, :]


def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def render(pose: Pose | None, skel: Skeleton, textures: Textures, bg_offset, size: tuple[int, int]):
    """Rasterize one frame.

    Returns (image (3,H,W) float32, segment_map (H,W) int16, local_coord_map
    (2,H,W) float64). Pixel (x, y) is the point with those integer
    coordinates. ``pose=None`` renders the background alone.
    """
    h, w = size
    xs, ys = _pixel_grid(h, w)
    seg = np.full((h, w), BACKGROUND, np.int16)
    local = np.zeros((2, h, w))
    if pose is not None:
        frames = segment_transforms(pose, skel)
        for s in sorted(range(skel.n), key=lambda i: skel.z[i]):
            rot, origin = frames[s]
            dx, dy = xs - origin[0], ys - origin[1]
            lx = rot[0, 0] * dx + rot[1, 0] * dy
            ly = rot[0, 1] * dx + rot[1, 1] * dy
            along = np.clip(lx, 0.0, skel.length[s])
            inside = (lx - along) ** 2 + ly**2 <= skel.half_width[s] ** 2
            seg[inside] = s
            local[0][inside] = lx[inside]
            local[1][inside] = ly[inside]
    ox, oy = bg_offset
    image = textures.background_rgb(xs - ox, ys - oy)
    for s in np.unique(seg[seg >= 0]):
        m = seg == s
        image[:, m] = textures.segment_rgb(int(s), local[0][m], local[1][m])
    image = np.clip(image, 0.0, 1.0).astype(DTYPE)
    return image, seg, local


def ground_truth_flow(pose1, pose2, skel: Skeleton, segment_map, local_coord_map, bg_offset1, bg_offset2):
    """Exact frame-1 -> frame-2 flow and its validity mask.

    Figure pixels follow their segment's rigid motion; background pixels
    move with the background offset. A pixel is invalid only when its
    target leaves the image.
    """
    seg = np.asarray(segment_map)
    local = np.asarray(local_coord_map, np.float64)
    if seg.ndim != 2 or local.shape != (2,) + seg.shape:
        raise ConfigError(f"segment map {seg.shape} and local map {local.shape} disagree")
    h, w = seg.shape
    if seg.max(initial=BACKGROUND) >= skel.n or seg.min(initial=BACKGROUND) < BACKGROUND:
        raise ConfigError("segment map references segments the skeleton does not have")
    if (pose1 is None) != (pose2 is None) or (pose1 is None and np.any(seg >= 0)):
        raise ConfigError("segment map does not match the supplied poses")
    xs, ys = _pixel_grid(h, w)
    tx = xs + (bg_offset2[0] - bg_offset1[0])
    ty = ys + (bg_offset2[1] - bg_offset1[1])
    if pose1 is not None:
        # displacement as (R2 - R1) l + (o2 - o1): exactly zero for an unchanged segment
        frames1 = segment_transforms(pose1, skel)
        frames2 = segment_transforms(pose2, skel)
        for s in np.unique(seg[seg >= 0]):
            m = seg == s
            (rot1, o1), (rot2, o2) = frames1[int(s)], frames2[int(s)]
            dr, do = rot2 - rot1, o2 - o1
            lx, ly = local[0][m], local[1][m]
            tx[m] = xs[m] + (do[0] + dr[0, 0] * lx + dr[0, 1] * ly)
            ty[m] = ys[m] + (do[1] + dr[1, 0] * lx + dr[1, 1] * ly)
    flow = np.stack([tx - xs, ty - ys]).astype(DTYPE)
    valid = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    return flow, valid[None].astype(DTYPE)


def non_occluded_mask(flow: np.ndarray, seg1: np.ndarray, seg2: np.ndarray) -> np.ndarray:
    """Frame-1 pixels whose bilinear footprint in frame 2 shows the same surface."""
    h, w = seg1.shape
    xs, ys = _pixel_grid(h, w)
    tx, ty = xs + flow[0], ys + flow[1]
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    x0 = np.clip(np.floor(tx), 0, w - 1).astype(int)
    y0 = np.clip(np.floor(ty), 0, h - 1).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    ok = inside.copy()
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        ok &= seg2[yy, xx] == seg1
    return ok


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per sample so any generation order gives the same bytes."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_sample(cfg: GenConfig, index: int) -> Sample:
    rng = sample_rng(cfg.seed, index)
    skel = cfg.skeleton()
    textures = Textures.random(rng, cfg)
    size = (cfg.height, cfg.width)
    span = ValueNoise.PERIOD * cfg.base_period
    off1 = rng.uniform(0, span, size=2)
    r = cfg.bg_motion * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    off2 = off1 + np.array([r * math.cos(phi), r * math.sin(phi)])
    if cfg.mode == "translation":
        pose1 = pose2 = None
    else:
        pose1, pose2 = sample_pose_pair(rng, skel, cfg)
    img1, seg1, local1 = render(pose1, skel, textures, off1, size)
    img2, _, _ = render(pose2, skel, textures, off2, size)
    flow, valid = ground_truth_flow(pose1, pose2, skel, seg1, local1, off1, off2)
    return Sample(img1, img2, flow, valid, seg1, {"index": index})


# ---------------------------------------------------------------------------
# persistence


def _names(i: int) -> dict:
    stem = f"{i:06d}"
    return {
        "id": i,
        "image1": f"{stem}_img1.ppm",
        "image2": f"{stem}_img2.ppm",
        "flow": f"{stem}_flow.flo",
        "mask": f"{stem}_mask.pgm",
        "segmap": f"{stem}_seg.pgm",
    }


def segmap_bytes(seg: np.ndarray) -> np.ndarray:
    return np.where(seg < 0, _BG_BYTE, seg).astype(np.uint8)


def write_sample(sample: Sample, out_dir: Path, entry: dict) -> None:
    flowio.write_ppm(sample.image1, out_dir / entry["image1"])
    flowio.write_ppm(sample.image2, out_dir / entry["image2"])
    flowio.write_flo(sample.gt_flow, out_dir / entry["flow"])
    flowio.write_pgm(sample.valid_mask, out_dir / entry["mask"])
    flowio.write_pgm_bytes(segmap_bytes(sample.segment_map), out_dir / entry["segmap"])


def generate_dataset(cfg: GenConfig, out_dir) -> Path:
    """Write ``cfg.count`` samples plus a manifest into ``out_dir``.

    Output is a pure function of the config. On any failure every file this
    call created is removed again.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    created_dir = not out_dir.exists()
    written: list[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(cfg.count):
            entry = _names(i)
            paths = [out_dir / entry[k] for k in ("image1", "image2", "flow", "mask", "segmap")]
            written.extend(paths)
            write_sample(make_sample(cfg, i), out_dir, entry)
            entries.append(entry)
            if (i + 1) % 100 == 0:
                log.info("generated %d/%d samples", i + 1, cfg.count)
        manifest = {
            "version": MANIFEST_VERSION,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "samples": entries,
        }
        written.append(out_dir / MANIFEST)
        (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        if created_dir:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise
    return out_dir


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"manifest {path} has an unsupported version")
    for key in ("seed", "config", "samples"):
        if key not in manifest:
            raise FormatError(f"manifest {path} lacks {key!r}")
    return manifest


def load_sample(data_dir: Path, entry: dict) -> Sample:
    img1 = flowio.read_ppm(data_dir / entry["image1"])
    img2 = flowio.read_ppm(data_dir / entry["image2"])
    flow = flowio.read_flo(data_dir / entry["flow"])
    mask = (flowio.read_pgm_bytes(data_dir / entry["mask"]) > 127).astype(DTYPE)[None]
    seg = flowio.read_pgm_bytes(data_dir / entry["segmap"]).astype(np.int16)
    seg[seg == _BG_BYTE] = BACKGROUND
    if not (img1.shape == img2.shape and flow.shape[1:] == img1.shape[1:] == seg.shape):
        raise FormatError(f"sample {entry['id']} has inconsistent resolutions")
    return Sample(img1, img2, flow, mask, seg, {"index": entry["id"]})


def load_dataset(data_dir) -> list[Sample]:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    try:
        return [load_sample(data_dir, e) for e in manifest["samples"]]
    except FileNotFoundError as exc:
        raise FormatError(f"dataset file missing: {exc.filename}") from None
