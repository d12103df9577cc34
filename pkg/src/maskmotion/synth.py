"""Desk-scale synthetic video engine.

Parametric moving-shape scenes with per-instance ground-truth masks and
stable identities, static occluders, crossing trajectories, blob
deformation, and temporal subsampling to emulate low-FPS footage. Masks are
modal (visible pixels only): a fully occluded instance keeps its identity
but has an empty mask for those frames.

Dataset directory layout:
    manifest.json               scene list, preset, seed, 80/20 split
    scenes/<id>/masks.txt       all instances, run-length text format
    scenes/<id>/frames/<t>.ppm  binary PPM (P6), t = emitted frame index
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from maskmotion.masks import FrameMask, MaskSequence, read_sequences, write_sequences

SHAPE_KINDS = ("disk", "rectangle", "blob")
RECT_ASPECT = 0.72  # rectangle half-height = RECT_ASPECT * size
BLOB_HARMONICS = (2, 3, 4)
OCCLUDER_SHADE = (70, 70, 70)
BACKGROUND_SHADE = 30
BACKGROUND_NOISE = 12.0


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    size: float                      # disk/blob radius, rectangle half-width (px)
    position: tuple[float, float]    # (x, y) center at t=0
    velocity: tuple[float, float]    # px/frame
    velocity_noise: float = 0.0      # sigma of per-frame velocity jitter
    turn_rate: float = 0.0           # radians/frame the velocity vector rotates
    deform_rate: float = 0.0         # radians/frame of blob harmonic drift
    color: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"shape kind must be one of {SHAPE_KINDS}, got {self.kind!r}")
        if self.size <= 0:
            raise ValueError(f"shape size must be positive, got {self.size}")

    def half_extent(self) -> tuple[float, float]:
        if self.kind == "rectangle":
            return (self.size, self.size * RECT_ASPECT)
        if self.kind == "blob":
            bound = self.size * (1.0 + sum(0.12 for _ in BLOB_HARMONICS))
            return (bound, bound)
        return (self.size, self.size)


@dataclass(frozen=True)
class Occluder:
    """Static opaque axis-aligned box; always in front of every instance."""

    x0: float
    y0: float
    x1: float
    y1: float
    depth: int = 0


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int]          # (height, width)
    shapes: tuple[ShapeSpec, ...]
    occluders: tuple[Occluder, ...] = ()
    num_frames: int = 16
    sample_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "occluders", tuple(self.occluders))
        h, w = self.canvas
        if h < 8 or w < 8:
            raise ValueError(f"canvas must be at least 8x8, got {self.canvas}")
        if self.num_frames < 3:
            raise ValueError(f"num_frames must be >= 3, got {self.num_frames}")
        if self.sample_stride < 1:
            raise ValueError(f"sample_stride must be >= 1, got {self.sample_stride}")
        if not self.shapes:
            raise ValueError("a scene needs at least one shape")
        for i, s in enumerate(self.shapes):
            ex, ey = s.half_extent()
            x, y = s.position
            if not (0 <= x - ex and x + ex <= w and 0 <= y - ey and y + ey <= h):
                raise ValueError(f"shape {i} does not fit the canvas at t=0")

    @property
    def emitted_indices(self) -> tuple[int, ...]:
        return tuple(range(0, self.num_frames, self.sample_stride))


@dataclass(frozen=True)
class Scene:
    """One rendered scene: images plus per-instance identity-carrying masks."""

    scene_id: str
    frame_indices: tuple[int, ...]
    images: np.ndarray               # (T, H, W, 3) float64 in [0, 1]
    masks: tuple[MaskSequence, ...]  # one per instance, same indices

    @property
    def canvas(self) -> tuple[int, int]:
        return self.images.shape[1:3]

    @property
    def num_instances(self) -> int:
        return len(self.masks)


def _auto_color(rng: np.random.Generator) -> tuple[int, int, int]:
    # bright saturated-ish colors, away from background and occluder shades
    c = rng.integers(110, 256, size=3)
    return tuple(int(v) for v in c)


def _blob_profile(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    amps = rng.uniform(0.04, 0.12, size=len(BLOB_HARMONICS))
    phases = rng.uniform(0, 2 * np.pi, size=len(BLOB_HARMONICS))
    return amps, phases


def _rasterize(shape: ShapeSpec, cx: float, cy: float, grid, t: int,
               amps: np.ndarray | None, phases: np.ndarray | None) -> np.ndarray:
    yy, xx = grid
    if shape.kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= shape.size ** 2
    if shape.kind == "rectangle":
        ex, ey = shape.half_extent()
        return (np.abs(xx - cx) <= ex) & (np.abs(yy - cy) <= ey)
    # blob: radius modulated by drifting low-frequency harmonics
    theta = np.arctan2(yy - cy, xx - cx)
    r = np.full_like(theta, 1.0)
    for k, a, p in zip(BLOB_HARMONICS, amps, phases):
        r = r + a * np.cos(k * theta + p + t * shape.deform_rate)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= (shape.size * r) ** 2


def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def simulate_positions(shapes, num_frames: int, vel_noise: np.ndarray) -> np.ndarray:
    """Integrate every shape's trajectory: the base velocity rotates by
    turn_rate each step and per-frame jitter adds on top."""
    positions = np.zeros((num_frames, len(shapes), 2))
    velocities = np.array([s.velocity for s in shapes], dtype=float)
    for i, s in enumerate(shapes):
        positions[0, i] = s.position
    for t in range(1, num_frames):
        for i, s in enumerate(shapes):
            if s.turn_rate != 0.0:
                velocities[i] = _rotation(s.turn_rate) @ velocities[i]
            v = velocities[i]
            if s.velocity_noise > 0:
                v = v + s.velocity_noise * vel_noise[t, i]
            positions[t, i] = positions[t - 1, i] + v
    return positions


def render_scene(spec: SceneSpec, scene_id: str = "scene") -> Scene:
    """Deterministically render a scene under its seed.

    The full trajectory is simulated at stride 1 and frames are emitted at
    the sample stride, so subsampling commutes with rendering. Later shapes
    in the list occlude earlier ones; occluders sit in front of everything.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.canvas
    n_shapes = len(spec.shapes)
    # draw all randomness up front so emitted frames never depend on stride
    vel_noise = rng.normal(0.0, 1.0, size=(spec.num_frames, n_shapes, 2))
    blob_profiles = [_blob_profile(rng) if s.kind == "blob" else (None, None) for s in spec.shapes]
    colors = [s.color if s.color is not None else _auto_color(rng) for s in spec.shapes]
    image_noise = rng.normal(0.0, BACKGROUND_NOISE, size=(spec.num_frames, h, w))

    positions = simulate_positions(spec.shapes, spec.num_frames, vel_noise)

    grid = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5  # pixel centers
    occluder_mask = np.zeros((h, w), dtype=bool)
    for occ in spec.occluders:
        yy, xx = grid
        occluder_mask |= (xx >= occ.x0) & (xx <= occ.x1) & (yy >= occ.y0) & (yy <= occ.y1)

    emitted = spec.emitted_indices
    if len(emitted) < 2:
        raise ValueError(f"stride {spec.sample_stride} leaves {len(emitted)} frames; need >= 2")

    images = np.zeros((len(emitted), h, w, 3))
    visible: list[list[FrameMask]] = [[] for _ in range(n_shapes)]
    for out_idx, t in enumerate(emitted):
        rasters = []
        for i, s in enumerate(spec.shapes):
            cx, cy = positions[t, i]
            amps, phases = blob_profiles[i]
            rasters.append(_rasterize(s, cx, cy, grid, t, amps, phases))
        # depth resolution: later shapes occlude earlier ones
        blocked = occluder_mask.copy()
        resolved = [None] * n_shapes
        for i in range(n_shapes - 1, -1, -1):
            resolved[i] = rasters[i] & ~blocked
            blocked |= rasters[i]
        for i in range(n_shapes):
            visible[i].append(FrameMask(resolved[i].astype(np.uint8)))

        img = np.full((h, w, 3), float(BACKGROUND_SHADE))
        for i in range(n_shapes):
            img[resolved[i]] = colors[i]
        for occ in sorted(spec.occluders, key=lambda o: o.depth):
            yy, xx = grid
            region = (xx >= occ.x0) & (xx <= occ.x1) & (yy >= occ.y0) & (yy <= occ.y1)
            img[region] = OCCLUDER_SHADE
        # sensor noise covers everything: appearance embeddings sampled from
        # small visible fragments degrade naturally
        img += image_noise[t][..., None]
        images[out_idx] = np.clip(img, 0, 255) / 255.0

    masks = tuple(
        MaskSequence(f"{scene_id}_obj{i}", tuple(visible[i]), emitted)
        for i in range(n_shapes)
    )
    return Scene(scene_id, emitted, images, masks)


# --- presets ----------------------------------------------------------------

PRESETS = ("translation", "crossing", "occlusion", "sparse", "deform")


def _random_direction(rng) -> np.ndarray:
    a = rng.uniform(0, 2 * np.pi)
    return np.array([np.cos(a), np.sin(a)])


def _fit_start(canvas, size, velocity, num_frames, rng, margin=1.0):
    """Start position such that the shape stays on-canvas for the whole scene."""
    h, w = canvas
    vx, vy = velocity
    ex = ey = size + margin
    lo_x = ex + max(0.0, -vx * (num_frames - 1))
    hi_x = w - ex - max(0.0, vx * (num_frames - 1))
    lo_y = ey + max(0.0, -vy * (num_frames - 1))
    hi_y = h - ey - max(0.0, vy * (num_frames - 1))
    if lo_x >= hi_x or lo_y >= hi_y:
        return None
    return (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))


def _fit_moving_shape(rng, canvas, size, speed, num_frames):
    """Velocity + start keeping the shape on-canvas; decays speed if the
    canvas cannot hold a full-length straight path."""
    while True:
        for _attempt in range(40):
            vel = tuple(speed * _random_direction(rng))
            start = _fit_start(canvas, size, vel, num_frames, rng)
            if start is not None:
                return vel, start
        speed *= 0.8
        if speed < 0.5:
            # pathological geometry; park the shape mid-canvas, still moving
            return (0.5, 0.0), (canvas[1] / 2, canvas[0] / 2)


def _translation_spec(rng, canvas, num_frames, stride, equal_colors) -> SceneSpec:
    # speeds sit near half a shape radius per frame so the copy-last
    # baseline decays while one-step extrapolation stays learnable
    n = int(rng.integers(1, 4))
    shapes = []
    color = _auto_color(rng) if equal_colors else None
    for _ in range(n):
        kind = str(rng.choice(["disk", "rectangle"]))
        size = float(rng.uniform(5.0, 7.5))
        speed = float(rng.uniform(3.0, 4.5))
        vel, start = _fit_moving_shape(rng, canvas, size, speed, num_frames)
        shapes.append(ShapeSpec(kind, size, start, vel,
                                color=color if equal_colors else _auto_color(rng)))
    return SceneSpec(canvas, tuple(shapes), (), num_frames, stride, int(rng.integers(2**31)))


def _crossing_spec(rng, canvas, num_frames, stride, equal_colors) -> SceneSpec:
    # exactly two instances whose straight paths intersect mid-scene;
    # sizes and speeds match the translation preset so one checkpoint
    # transfers across presets
    h, w = canvas
    cx = w / 2 + rng.uniform(-6, 6)
    cy = h / 2 + rng.uniform(-6, 6)
    t_meet = num_frames // 2
    shapes = []
    base_angle = rng.uniform(0, 2 * np.pi)
    cross_angle = rng.uniform(np.pi / 3, 2 * np.pi / 3)
    color = _auto_color(rng)
    for j, ang in enumerate((base_angle, base_angle + cross_angle)):
        size = float(rng.uniform(5.5, 7.5))
        speed = float(rng.uniform(3.0, 4.5))
        d = np.array([np.cos(ang), np.sin(ang)])
        start = np.array([cx, cy]) - d * speed * t_meet
        # clamp the start so the body stays on canvas; speed shrinks if needed
        ex = size + 1.0
        end = start + d * speed * (num_frames - 1)
        for p in (start, end):
            if not (ex <= p[0] <= w - ex and ex <= p[1] <= h - ex):
                scale = 0.6
                speed *= scale
                start = np.array([cx, cy]) - d * speed * t_meet
                end = start + d * speed * (num_frames - 1)
        start[0] = np.clip(start[0], ex, w - ex)
        start[1] = np.clip(start[1], ex, h - ex)
        kind = "disk" if j == 0 else str(rng.choice(["disk", "rectangle"]))
        shapes.append(ShapeSpec(kind, size, tuple(start), tuple(d * speed),
                                color=color if equal_colors else _auto_color(rng)))
    return SceneSpec(canvas, tuple(shapes), (), num_frames, stride, int(rng.integers(2**31)))


def _occlusion_spec(rng, canvas, num_frames, stride, equal_colors) -> SceneSpec:
    # gently curving paths cross behind a vertical bar at staggered times;
    # every shape fully hides for a frame or two and reappears, which is
    # exactly the regime where straight-line extrapolation goes stale.
    # Shapes share a base color with small jitter: appearance stays weakly
    # informative but ambiguous around the occlusion events.
    h, w = canvas
    n = int(rng.integers(2, 4))
    base_color = np.array(_auto_color(rng))
    kinds = ["disk", "rectangle"]
    sizes = rng.uniform(5.5, 7.5, size=n)
    speed = float(rng.uniform(3.0, 4.5))
    bar_half = float(max(sizes) + speed / 2 + 1.5)
    bar_cx = w / 2 + rng.uniform(-4, 4)
    occ = Occluder(bar_cx - bar_half, -1.0, bar_cx + bar_half, h + 1.0)

    def bar_hides(spec_shape, pos):
        ex, _ = spec_shape.half_extent()
        return pos[0] - ex >= occ.x0 and pos[0] + ex <= occ.x1

    def jittered_color():
        c = base_color + rng.integers(-12, 13, size=3)
        return tuple(int(v) for v in np.clip(c, 40, 255))

    # stagger the bar arrivals so occlusion events rarely coincide
    mid = num_frames // 2
    t_mids = [mid + int(round((i - (n - 1) / 2) * 4)) + int(rng.integers(-1, 2))
              for i in range(n)]
    shapes = []
    for i in range(n):
        size = float(sizes[i])
        kind = kinds[i % len(kinds)]
        color = base_color if equal_colors else jittered_color()
        color = tuple(int(v) for v in color)
        chosen = None
        for attempt in range(40):
            turn = float(rng.uniform(0.09, 0.22)) * (1.0 if rng.random() < 0.5 else -1.0)
            if attempt >= 20:
                turn = 0.0  # fall back to a straight crossing
            direction = 1.0 if rng.random() < 0.5 else -1.0
            t_mid = int(np.clip(t_mids[i], 3, num_frames - 4))
            candidate = ShapeSpec(kind, size, (0.0, 0.0), (direction * speed, 0.0),
                                  turn_rate=turn)
            ex, ey = candidate.half_extent()
            # aim the arc so the shape sits behind the bar center at t_mid
            path = simulate_positions([candidate], num_frames,
                                      np.zeros((num_frames, 1, 2)))[:, 0]
            offset = np.array([bar_cx, rng.uniform(ey + 3, h - ey - 3)]) - path[t_mid]
            path = path + offset
            inside = ((path[:, 0] >= ex + 1) & (path[:, 0] <= w - ex - 1)
                      & (path[:, 1] >= ey + 1) & (path[:, 1] <= h - ey - 1))
            hidden = [t for t in range(num_frames) if bar_hides(candidate, path[t])]
            reappears = bool(hidden) and max(hidden) < num_frames - 1 and min(hidden) > 0
            if inside.all() and reappears:
                chosen = ShapeSpec(kind, size, tuple(path[0]),
                                   (direction * speed, 0.0), turn_rate=turn, color=color)
                break
        if chosen is None:
            # deterministic last resort: straight slow crossing through the bar
            y = float(rng.uniform(size + 3, h - size - 3))
            chosen = ShapeSpec(kind, size,
                               (max(size + 1, bar_cx - speed * (num_frames // 2)), y),
                               (speed, 0.0), color=color)
        shapes.append(chosen)
    return SceneSpec(canvas, tuple(shapes), (occ,), num_frames, stride, int(rng.integers(2**31)))


def _sparse_spec(rng, canvas, num_frames, stride, equal_colors) -> SceneSpec:
    spec = _translation_spec(rng, canvas, num_frames * max(stride, 5), max(stride, 5), equal_colors)
    return spec


def _deform_spec(rng, canvas, num_frames, stride, equal_colors) -> SceneSpec:
    n = int(rng.integers(1, 3))
    shapes = []
    for _ in range(n):
        size = float(rng.uniform(6.0, 9.0))
        speed = float(rng.uniform(2.0, 4.0))
        vel, start = _fit_moving_shape(rng, canvas, size * 1.4, speed, num_frames)
        shapes.append(ShapeSpec("blob", size, start, vel,
                                deform_rate=float(rng.uniform(0.1, 0.35)),
                                color=None if equal_colors else _auto_color(rng)))
    return SceneSpec(canvas, tuple(shapes), (), num_frames, stride, int(rng.integers(2**31)))


_PRESET_BUILDERS = {
    "translation": _translation_spec,
    "crossing": _crossing_spec,
    "occlusion": _occlusion_spec,
    "sparse": _sparse_spec,
    "deform": _deform_spec,
}


def build_scene_spec(preset: str, rng: np.random.Generator, canvas=(64, 64),
                     num_frames=16, sample_stride=1, equal_colors=False) -> SceneSpec:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    return _PRESET_BUILDERS[preset](rng, canvas, num_frames, sample_stride, equal_colors)


# --- PPM image I/O ----------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 writer; image is (H, W, 3) float in [0, 1]."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


# --- dataset directory ------------------------------------------------------


def make_benchmark_suite(preset: str, count: int, seed: int, out_dir,
                         canvas=(64, 64), num_frames=16, sample_stride=1,
                         equal_colors=False) -> Path:
    """Generate `count` scenes and write the dataset directory.

    Scene parameters and rendering are fully determined by (preset, count,
    seed, overrides); identical calls produce bitwise-identical directories.
    Scenes are split 80/20 train/val by index.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    scene_seeds = master.integers(0, 2**62, size=count)
    # 80/20 by scene index; both splits stay nonempty once count >= 2
    n_train = 1 if count == 1 else min(count - 1, max(1, round(count * 0.8)))
    records = []
    for i in range(count):
        rng = np.random.default_rng(int(scene_seeds[i]))
        spec = build_scene_spec(preset, rng, canvas=canvas, num_frames=num_frames,
                                sample_stride=sample_stride, equal_colors=equal_colors)
        scene_id = f"scene_{i:04d}"
        scene = render_scene(spec, scene_id)
        scene_dir = out / "scenes" / scene_id
        frames_dir = scene_dir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        write_sequences(scene_dir / "masks.txt", scene.masks)
        for out_idx, t in enumerate(scene.frame_indices):
            write_ppm(frames_dir / f"{t:06d}.ppm", scene.images[out_idx])
        records.append({
            "id": scene_id,
            "split": "train" if i < n_train else "val",
            "num_frames": spec.num_frames,
            "sample_stride": spec.sample_stride,
            "frame_indices": list(scene.frame_indices),
            "num_instances": len(spec.shapes),
            "seed": int(scene_seeds[i]),
        })
    manifest = {
        "format_version": 1,
        "preset": preset,
        "count": count,
        "seed": seed,
        "canvas": list(canvas),
        "num_frames": num_frames,
        "sample_stride": sample_stride,
        "equal_colors": bool(equal_colors),
        "scenes": records,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out


class SceneDataset:
    """Streaming reader over a dataset directory; validates on access."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            self.manifest = json.load(fh)
        self.scene_records = self.manifest["scenes"]
        on_disk = sorted(p.name for p in (self.root / "scenes").iterdir() if p.is_dir())
        listed = sorted(r["id"] for r in self.scene_records)
        if on_disk != listed:
            raise ValueError(
                f"manifest lists {len(listed)} scenes but directory has {len(on_disk)}")

    def __len__(self) -> int:
        return len(self.scene_records)

    @property
    def canvas(self) -> tuple[int, int]:
        return tuple(self.manifest["canvas"])

    def split_indices(self, split: str) -> list[int]:
        if split == "all":
            return list(range(len(self.scene_records)))
        return [i for i, r in enumerate(self.scene_records) if r["split"] == split]

    def load_scene(self, index: int) -> Scene:
        rec = self.scene_records[index]
        scene_dir = self.root / "scenes" / rec["id"]
        masks = tuple(read_sequences(scene_dir / "masks.txt"))
        indices = tuple(rec["frame_indices"])
        for seq in masks:
            if seq.frame_indices != indices:
                raise ValueError(
                    f"{rec['id']}: sequence {seq.instance_id} indices {seq.frame_indices} "
                    f"differ from manifest {indices}")
        images = []
        for t in indices:
            frame_path = scene_dir / "frames" / f"{t:06d}.ppm"
            if not frame_path.is_file():
                raise FileNotFoundError(f"missing frame file {frame_path}")
            images.append(read_ppm(frame_path))
        return Scene(rec["id"], indices, np.stack(images), masks)

    def iter_split(self, split: str):
        for i in self.split_indices(split):
            yield self.load_scene(i)


def load_dataset(path) -> SceneDataset:
    return SceneDataset(path)
