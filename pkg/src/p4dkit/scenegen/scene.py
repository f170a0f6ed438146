"""Synthetic 4D scenes: flat-shaded boxes moving over a checkered floor in front of a wall.

Every signal map is computed from geometry (ray casting against the analytic
scene), never from rendered pixels, so the maps double as exact oracles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import camera_center, intrinsics_matrix, plucker_rays, project, ray_directions, rotation_yaw_pitch

log = logging.getLogger(__name__)

MODALITY_CHANNELS = {"depth": 1, "flow": 2, "motion": 1, "camray": 6}
MODALITIES = tuple(MODALITY_CHANNELS)

_FACE_SHADE = np.array([0.72, 0.88, 1.0])  # x-, y-, z-facing faces


class SceneError(ValueError):
    pass


@dataclass
class ObjectSpec:
    size: tuple[float, float, float]
    position: tuple[float, float, float]
    velocity: tuple[float, float, float]
    color: tuple[float, float, float]

    @property
    def moving(self) -> bool:
        return bool(np.any(np.asarray(self.velocity) != 0.0))


@dataclass
class CameraSpec:
    focal: float
    principal: tuple[float, float]
    rotations: np.ndarray  # (N, 3, 3) world-to-camera
    translations: np.ndarray  # (N, 3)

    @property
    def K(self) -> np.ndarray:
        return intrinsics_matrix(self.focal, self.principal)

    def center(self, n: int) -> np.ndarray:
        return camera_center(self.rotations[n], self.translations[n])


@dataclass
class SceneSpec:
    seed: int
    n_frames: int
    fps: float
    image_size: tuple[int, int]
    camera: CameraSpec
    objects: list[ObjectSpec] = field(default_factory=list)
    floor_y: float = 1.5
    wall_z: float = 14.0
    video_id: str = ""

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames, dtype=np.float64) / self.fps

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.fps

    @property
    def clip_length(self) -> float:
        """Seconds covered by the clip when each frame spans 1/fps (N / fps)."""
        return self.n_frames / self.fps

    def object_center(self, k: int, time: float) -> np.ndarray:
        o = self.objects[k]
        return np.asarray(o.position, dtype=np.float64) + np.asarray(o.velocity, dtype=np.float64) * time

    def validate(self) -> None:
        if self.n_frames < 2:
            raise SceneError(f"need at least 2 frames, got {self.n_frames}")
        if not self.fps > 0:
            raise SceneError(f"fps must be positive, got {self.fps}")
        if not self.camera.focal > 0:
            raise SceneError(f"focal length must be positive, got {self.camera.focal}")
        if self.camera.rotations.shape != (self.n_frames, 3, 3) or self.camera.translations.shape != (self.n_frames, 3):
            raise SceneError("camera needs one pose per frame")
        for n, time in enumerate(self.timestamps):
            R, t = self.camera.rotations[n], self.camera.translations[n]
            for k, o in enumerate(self.objects):
                half = np.asarray(o.size) / 2
                corners = self.object_center(k, time) + half * _CORNER_SIGNS
                z = (corners @ R.T + t)[:, 2]
                if np.any(z <= 0):
                    raise SceneError(
                        f"object {k} leaves the positive-depth half-space at frame {n} (t={time:.3f}s, min z={z.min():.3f})"
                    )
            if self.camera.center(n)[1] >= self.floor_y or self.camera.center(n)[2] >= self.wall_z:
                raise SceneError(f"camera outside the room at frame {n}")


_CORNER_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)


@dataclass
class VideoTensor:
    frames: np.ndarray  # (N, H, W, 3) in [0, 1]
    timestamps: np.ndarray  # (N,) seconds
    video_id: str = ""

    def __post_init__(self):
        if len(self.frames) != len(self.timestamps):
            raise ValueError("frame count and timestamp count differ")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")


@dataclass
class SignalSet:
    depth: np.ndarray  # (N, H, W, 1) metres
    flow: np.ndarray  # (N, H, W, 2) pixels, forward n -> n+1, zero at the last frame
    motion: np.ndarray  # (N, H, W, 1) in {0, 1}
    camray: np.ndarray  # (N, H, W, 6)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {m: getattr(self, m) for m in MODALITIES}


@dataclass
class SceneMeta:
    video_id: str
    timestamps: np.ndarray
    fps: float
    positions: np.ndarray  # (N, K, 3) world object centres
    centers_cam: np.ndarray  # (N, K, 3) object centres in each frame's camera coordinates
    velocities: np.ndarray  # (K, 3)
    sizes: np.ndarray  # (K, 3)
    boxes_2d: np.ndarray  # (N, K, 4) projected x0, y0, x1, y1 clipped to the image
    displacement: np.ndarray  # (K, 3)
    path_length: np.ndarray  # (K,)
    speed: np.ndarray  # (K,)
    rotations: np.ndarray  # (N, 3, 3)
    translations: np.ndarray  # (N, 3)
    id_maps: np.ndarray  # (N, H, W) object index per pixel, -1 for floor / wall
    image_size: tuple[int, int] = (0, 0)

    @property
    def n_objects(self) -> int:
        return len(self.velocities)

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])

    @property
    def clip_length(self) -> float:
        return len(self.timestamps) / self.fps

    def first_frame_mask(self, k: int) -> np.ndarray:
        return self.id_maps[0] == k


def _intersect_boxes(o, d, centers, halves):
    """Slab test for all boxes. Returns entry distance (inf for a miss) and entry axis per box."""
    H, W, _ = d.shape
    K = len(centers)
    s_hit = np.full((K, H, W), np.inf)
    axis = np.zeros((K, H, W), dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(K):
            lo = centers[k] - halves[k] - o
            hi = centers[k] + halves[k] - o
            t1 = lo / d
            t2 = hi / d
            tnear = np.minimum(t1, t2)
            tfar = np.maximum(t1, t2)
            s_in = tnear.max(axis=-1)
            s_out = tfar.min(axis=-1)
            hit = (s_out >= s_in) & (s_in > 0)
            s_hit[k] = np.where(hit, s_in, np.inf)
            axis[k] = tnear.argmax(axis=-1)
    return s_hit, axis


def _cast(spec: SceneSpec, n: int):
    """Ray-cast frame ``n``: hit distance, hit point, object id and shading inputs per pixel."""
    H, W = spec.image_size
    K_mat = spec.camera.K
    R, t = spec.camera.rotations[n], spec.camera.translations[n]
    o = camera_center(R, t)
    d, norm = ray_directions(K_mat, R, H, W)
    time = spec.timestamps[n]

    with np.errstate(divide="ignore", invalid="ignore"):
        s_wall = np.where(d[..., 2] > 0, (spec.wall_z - o[2]) / d[..., 2], np.inf)
        s_floor = np.where(d[..., 1] > 0, (spec.floor_y - o[1]) / d[..., 1], np.inf)
    s_floor = np.where(s_floor > 0, s_floor, np.inf)
    s = np.minimum(s_wall, s_floor)
    ids = np.full((H, W), -1, dtype=np.int64)
    is_floor = s_floor < s_wall
    face = np.zeros((H, W), dtype=np.int64)

    if spec.objects:
        centers = np.stack([spec.object_center(k, time) for k in range(len(spec.objects))])
        halves = np.stack([np.asarray(ob.size, dtype=np.float64) / 2 for ob in spec.objects])
        s_obj, axis = _intersect_boxes(o, d, centers, halves)
        nearest = s_obj.argmin(axis=0)
        s_near = np.take_along_axis(s_obj, nearest[None], axis=0)[0]
        take = s_near < s
        s = np.where(take, s_near, s)
        ids = np.where(take, nearest, ids)
        face = np.take_along_axis(axis, nearest[None], axis=0)[0]
    if not np.all(np.isfinite(s)):
        raise SceneError(f"rays escape the room at frame {n}")
    X = o + s[..., None] * d
    return s, X, ids, is_floor, face, norm


def generate_scene(spec: SceneSpec) -> tuple[VideoTensor, SignalSet, SceneMeta]:
    spec.validate()
    N = spec.n_frames
    H, W = spec.image_size
    K_obj = len(spec.objects)
    ts = spec.timestamps
    vel = np.array([ob.velocity for ob in spec.objects], dtype=np.float64).reshape(K_obj, 3)
    colors = np.array([ob.color for ob in spec.objects], dtype=np.float64).reshape(K_obj, 3)
    moving = np.array([ob.moving for ob in spec.objects], dtype=bool)

    frames = np.zeros((N, H, W, 3))
    depth = np.zeros((N, H, W, 1))
    flow = np.zeros((N, H, W, 2))
    motion = np.zeros((N, H, W, 1))
    camray = np.zeros((N, H, W, 6))
    id_maps = np.zeros((N, H, W), dtype=np.int64)

    for n in range(N):
        R, t = spec.camera.rotations[n], spec.camera.translations[n]
        s, X, ids, is_floor, face, norm = _cast(spec, n)
        depth[n, ..., 0] = s / norm
        id_maps[n] = ids
        camray[n] = plucker_rays(spec.camera.K, R, t, H, W)
        obj = ids >= 0
        if K_obj:
            motion[n, ..., 0] = np.where(obj, moving[np.clip(ids, 0, None)], False)

        checker = (np.floor(X[..., 0]) + np.floor(X[..., 2])).astype(np.int64) % 2
        floor_rgb = np.where(checker[..., None] == 1, 0.42, 0.30) * np.ones(3)
        height = np.clip((spec.floor_y - X[..., 1]) / 6.0, 0, 1)
        wall_rgb = np.stack([0.55 + 0.2 * height, 0.6 + 0.1 * height, 0.72 * np.ones_like(height)], axis=-1)
        img = np.where(is_floor[..., None], floor_rgb, wall_rgb)
        if K_obj:
            obj_rgb = colors[np.clip(ids, 0, None)] * _FACE_SHADE[face][..., None]
            img = np.where(obj[..., None], obj_rgb, img)
        frames[n] = np.clip(img, 0.0, 1.0)

        if n < N - 1:
            dt = ts[n + 1] - ts[n]
            X_next = X.copy()
            if K_obj:
                X_next = X_next + np.where(obj[..., None], vel[np.clip(ids, 0, None)], 0.0) * dt
            R1, t1 = spec.camera.rotations[n + 1], spec.camera.translations[n + 1]
            uv_next, _ = project(spec.camera.K, R1, t1, X_next)
            # differencing two projections (rather than subtracting pixel indices) keeps static
            # pixels under a static camera at exactly zero
            uv_now, _ = project(spec.camera.K, spec.camera.rotations[n], spec.camera.translations[n], X)
            flow[n] = uv_next - uv_now

    positions = np.stack([[spec.object_center(k, tm) for k in range(K_obj)] for tm in ts]).reshape(N, K_obj, 3)
    centers_cam = np.einsum("nij,nkj->nki", spec.camera.rotations, positions) + spec.camera.translations[:, None, :]
    sizes = np.array([ob.size for ob in spec.objects], dtype=np.float64).reshape(K_obj, 3)
    boxes = np.zeros((N, K_obj, 4))
    for n in range(N):
        for k in range(K_obj):
            corners = positions[n, k] + sizes[k] / 2 * _CORNER_SIGNS
            uv, _ = project(spec.camera.K, spec.camera.rotations[n], spec.camera.translations[n], corners)
            boxes[n, k] = [
                np.clip(uv[:, 0].min(), 0, W - 1),
                np.clip(uv[:, 1].min(), 0, H - 1),
                np.clip(uv[:, 0].max(), 0, W - 1),
                np.clip(uv[:, 1].max(), 0, H - 1),
            ]
    displacement = positions[-1] - positions[0]
    seg = np.linalg.norm(np.diff(positions, axis=0), axis=-1).sum(axis=0) if K_obj else np.zeros(0)
    duration = ts[-1] - ts[0]
    meta = SceneMeta(
        video_id=spec.video_id,
        timestamps=ts.copy(),
        fps=spec.fps,
        positions=positions,
        centers_cam=centers_cam,
        velocities=vel,
        sizes=sizes,
        boxes_2d=boxes,
        displacement=displacement,
        path_length=seg,
        speed=seg / duration,
        rotations=spec.camera.rotations.copy(),
        translations=spec.camera.translations.copy(),
        id_maps=id_maps,
        image_size=(H, W),
    )
    video = VideoTensor(frames=frames, timestamps=ts.copy(), video_id=spec.video_id)
    return video, SignalSet(depth, flow, motion, camray), meta


@dataclass
class SceneConfig:
    """Sampling ranges for random scenes (units: metres, seconds, pixels, radians)."""

    image_size: tuple[int, int] = (32, 32)
    n_frames: int = 8
    focal: float = 32.0
    fps_choices: tuple[float, ...] = (2.0, 4.0, 8.0)
    min_objects: int = 1
    max_objects: int = 3
    size_range: tuple[float, float] = (0.7, 1.5)
    depth_range: tuple[float, float] = (4.0, 9.0)
    speed_range: tuple[float, float] = (0.4, 1.6)
    p_static_object: float = 0.25
    p_camera_motion: float = 0.5
    camera_speed: float = 0.4
    camera_yaw_rate: float = 0.08
    # per-frame object step drawn independently of fps, so pixel motion carries no frame-rate cue
    time_decoupled_motion: bool = False
    step_range: tuple[float, float] = (0.05, 0.2)
    duration_log2_range: tuple[float, float] | None = None


_PALETTE = np.array(
    [
        [0.9, 0.2, 0.2], [0.2, 0.75, 0.25], [0.2, 0.35, 0.95], [0.95, 0.8, 0.15],
        [0.8, 0.3, 0.85], [0.15, 0.85, 0.85], [0.95, 0.55, 0.15], [0.95, 0.95, 0.95],
    ]
)


def sample_scene_spec(seed: int, cfg: SceneConfig | None = None, video_id: str | None = None,
                      max_tries: int = 200) -> SceneSpec:
    """Draw a valid random scene; invalid draws are rejected and redrawn from the same stream."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    H, W = cfg.image_size
    N = cfg.n_frames
    for _ in range(max_tries):
        if cfg.duration_log2_range is not None:
            clip_length = 2.0 ** rng.uniform(*cfg.duration_log2_range)
            fps = N / clip_length
        else:
            fps = float(rng.choice(cfg.fps_choices))
        ts = np.arange(N) / fps
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objects = []
        for k in range(n_obj):
            size = tuple(float(x) for x in rng.uniform(*cfg.size_range, size=3))
            z = rng.uniform(*cfg.depth_range)
            u = rng.uniform(4, W - 4)
            x = z * (u - W / 2) / cfg.focal
            y = 1.5 - size[1] / 2
            if rng.random() < cfg.p_static_object:
                vel = (0.0, 0.0, 0.0)
            else:
                heading = rng.uniform(0, 2 * np.pi)
                if cfg.time_decoupled_motion:
                    speed = rng.uniform(*cfg.step_range) * fps
                else:
                    speed = rng.uniform(*cfg.speed_range)
                vel = (float(speed * np.cos(heading)), 0.0, float(speed * np.sin(heading)))
            color = tuple(float(c) for c in _PALETTE[(k + int(rng.integers(0, len(_PALETTE)))) % len(_PALETTE)])
            objects.append(ObjectSpec(size, (float(x), float(y), float(z)), vel, color))
        rotations = np.tile(np.eye(3), (N, 1, 1))
        translations = np.zeros((N, 3))
        if rng.random() < cfg.p_camera_motion:
            cam_v = rng.uniform(-cfg.camera_speed, cfg.camera_speed, size=3) * np.array([1.0, 0.25, 1.0])
            yaw_rate = rng.uniform(-cfg.camera_yaw_rate, cfg.camera_yaw_rate)
            pitch_rate = rng.uniform(-cfg.camera_yaw_rate, cfg.camera_yaw_rate) * 0.5
            if cfg.time_decoupled_motion:
                cam_v, yaw_rate, pitch_rate = cam_v * fps / 4, yaw_rate * fps / 4, pitch_rate * fps / 4
            for n, tm in enumerate(ts):
                R = rotation_yaw_pitch(yaw_rate * tm, pitch_rate * tm)
                rotations[n] = R
                translations[n] = -R @ (cam_v * tm)
        spec = SceneSpec(
            seed=seed, n_frames=N, fps=float(fps), image_size=(H, W),
            camera=CameraSpec(cfg.focal, (W / 2, H / 2), rotations, translations),
            objects=objects, video_id=video_id or f"scene-{seed}",
        )
        try:
            spec.validate()
            _check_in_room(spec)
        except SceneError as exc:
            log.debug("rejected draw for seed %d: %s", seed, exc)
            continue
        return spec
    raise SceneError(f"no valid scene after {max_tries} draws for seed {seed}")


def _check_in_room(spec: SceneSpec) -> None:
    for n, tm in enumerate(spec.timestamps):
        for k in range(len(spec.objects)):
            c = spec.object_center(k, tm)
            if c[2] + spec.objects[k].size[2] / 2 >= spec.wall_z - 0.5:
                raise SceneError(f"object {k} reaches the wall at frame {n}")
            if spec.camera.center(n)[2] > c[2] - spec.objects[k].size[2] / 2 - 1.0 and abs(c[0] - spec.camera.center(n)[0]) < 3:
                raise SceneError(f"object {k} too close to the camera at frame {n}")


def scene_to_record(spec: SceneSpec) -> dict:
    return {
        "video_id": spec.video_id,
        "seed": spec.seed,
        "n_frames": spec.n_frames,
        "fps": spec.fps,
        "image_size": list(spec.image_size),
        "timestamps": spec.timestamps.tolist(),
        "camera": {
            "focal": spec.camera.focal,
            "principal": list(spec.camera.principal),
            "rotations": spec.camera.rotations.tolist(),
            "translations": spec.camera.translations.tolist(),
        },
        "objects": [
            {"size": list(o.size), "position": list(o.position), "velocity": list(o.velocity), "color": list(o.color)}
            for o in spec.objects
        ],
        "floor_y": spec.floor_y,
        "wall_z": spec.wall_z,
    }


def scene_from_record(rec: dict) -> SceneSpec:
    cam = rec["camera"]
    return SceneSpec(
        seed=int(rec["seed"]),
        n_frames=int(rec["n_frames"]),
        fps=float(rec["fps"]),
        image_size=tuple(rec["image_size"]),
        camera=CameraSpec(float(cam["focal"]), tuple(cam["principal"]), np.array(cam["rotations"]), np.array(cam["translations"])),
        objects=[ObjectSpec(tuple(o["size"]), tuple(o["position"]), tuple(o["velocity"]), tuple(o["color"])) for o in rec["objects"]],
        floor_y=float(rec.get("floor_y", 1.5)),
        wall_z=float(rec.get("wall_z", 14.0)),
        video_id=rec["video_id"],
    )
