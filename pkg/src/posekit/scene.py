"""Synthetic scenes, pose perturbations and on-disk datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DataError
from .geometry import CameraIntrinsics, Pose, axis_angle_to_quat, quat_multiply, random_quat, recover_translation
from .nn.functional import _interp_matrix
from .objects import PROCEDURAL, ObjectModel, load_obj, make_object, save_obj
from .renderer import RenderOutput, rasterize, read_ppm, write_ppm, write_raw

MAX_RESAMPLES = 100


@dataclass(frozen=True)
class SceneConfig:
    """Procedural scene stream; ``seed`` and the scene index fix every pixel."""

    objects: tuple[str, ...] = ("cube", "tetrahedron", "l_prism", "sphere")
    objects_per_scene: tuple[int, int] = (1, 1)
    depth_range: tuple[float, float] = (0.45, 0.65)
    image_size: int = 104
    focal: float = 130.0
    background: str = "noise"
    margin: float = 0.15
    n_points: int = 256
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"depth range must be positive and ordered, got {self.depth_range}")
        if self.background not in ("flat", "noise"):
            raise ConfigurationError(f"background must be 'flat' or 'noise', got {self.background!r}")
        for name in self.objects:
            if name not in PROCEDURAL:
                raise ConfigurationError(f"unknown object {name!r}")
        a, b = self.objects_per_scene
        if not 0 <= a <= b:
            raise ConfigurationError("objects_per_scene must be an ordered non-negative range")
        if self.image_size < 8 or self.focal <= 0:
            raise ConfigurationError("image_size and focal must be positive")
        if not 0 <= self.margin < 0.5:
            raise ConfigurationError("margin must lie in [0, 0.5)")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        s = self.image_size
        return CameraIntrinsics(self.focal, self.focal, s / 2, s / 2, s, s)

    def models(self) -> list[ObjectModel]:
        return [make_object(name, i, self.n_points) for i, name in enumerate(self.objects)]


@dataclass
class Scene:
    image: np.ndarray
    annotations: list[tuple[int, Pose]]
    K: CameraIntrinsics
    render: RenderOutput


def make_background(rng: np.random.Generator, size: int, mode: str) -> np.ndarray:
    if mode == "flat":
        return np.broadcast_to(rng.uniform(0.1, 0.9, 3), (size, size, 3)).copy()
    coarse = rng.uniform(0.0, 1.0, (6, 6, 3))
    U = _interp_matrix(6, size)
    smooth = np.einsum("oh,hwc,pw->opc", U, coarse, U)
    return np.clip(0.7 * smooth + 0.3 * rng.uniform(0.0, 1.0, (size, size, 3)), 0.0, 1.0)


def sample_pose(rng: np.random.Generator, cfg: SceneConfig) -> Pose:
    K = cfg.intrinsics
    s = cfg.image_size
    center = rng.uniform(cfg.margin * s, (1 - cfg.margin) * s, 2)
    tz = rng.uniform(*cfg.depth_range)
    return Pose(random_quat(rng), recover_translation(center, tz, K))


def generate_scene(cfg: SceneConfig, index: int, models: list[ObjectModel] | None = None) -> Scene:
    """Render scene ``index`` of the stream defined by ``cfg``."""
    models = models if models is not None else cfg.models()
    rng = np.random.default_rng([cfg.seed, index])
    K = cfg.intrinsics
    s = cfg.image_size
    background = make_background(rng, s, cfg.background)
    lo, hi = cfg.objects_per_scene
    n = int(rng.integers(lo, hi + 1)) if models else 0
    annotations = []
    out = RenderOutput.empty(s, s)
    for _ in range(n):
        cls = int(rng.integers(len(models)))
        pose = sample_pose(rng, cfg)
        rasterize(models[cls], pose, K, out=out)
        annotations.append((cls, pose))
    image = np.where(out.mask[..., None], out.rgb, background)
    return Scene(image, annotations, K, out)


def perturb_pose(pose: Pose, model: ObjectModel, rng: np.random.Generator, ang_range=(5.0, 45.0),
                 trans_range: float = 1.0) -> Pose:
    """Rotate by a random-axis angle drawn from ``ang_range`` (degrees) and
    shift by a random offset of norm at most ``trans_range * diameter``."""
    a0, a1 = ang_range
    if not 0 <= a0 <= a1 or trans_range < 0:
        raise ConfigurationError("perturbation ranges must be non-negative and ordered")
    for _ in range(MAX_RESAMPLES):
        axis = rng.normal(size=3)
        angle = np.deg2rad(rng.uniform(a0, a1))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        offset = direction * rng.uniform(0.0, 1.0) * trans_range * model.diameter
        t = pose.t + offset
        if t[2] > 0:
            if angle == 0:
                return Pose(pose.quat, t)
            return Pose(quat_multiply(axis_angle_to_quat(axis, angle), pose.quat), t)
    raise DataError("could not sample a perturbation in front of the camera")


# --- datasets on disk ------------------------------------------------------

@dataclass
class ManifestRecord:
    image: str
    objects: list[tuple[int, Pose]]
    K: CameraIntrinsics
    depth: str | None = None
    mask: str | None = None

    def to_json(self) -> str:
        d = {"image": self.image, "K": self.K.to_dict(),
             "objects": [{"class": c, **p.to_dict()} for c, p in self.objects]}
        if self.depth:
            d["depth"] = self.depth
        if self.mask:
            d["mask"] = self.mask
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        try:
            d = json.loads(line)
            objs = [(int(o["class"]), Pose.from_dict(o)) for o in d["objects"]]
            return cls(d["image"], objs, CameraIntrinsics.from_dict(d["K"]), d.get("depth"), d.get("mask"))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad manifest record: {e}") from e


@dataclass
class Dataset:
    root: Path
    records: list[ManifestRecord]
    models: list[ObjectModel] = field(default_factory=list)

    def image(self, i: int) -> np.ndarray:
        return read_ppm(self.root / self.records[i].image)

    def __len__(self) -> int:
        return len(self.records)


def write_dataset(cfg: SceneConfig, out_dir, count: int, start: int = 0) -> Dataset:
    out = Path(out_dir)
    for sub in ("images", "depth", "mask", "models"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    models = cfg.models()
    for m in models:
        save_obj(m, out / "models" / f"{m.id:02d}_{m.name}.obj", n_points=cfg.n_points, seed=0)
    records = []
    for i in range(start, start + count):
        scene = generate_scene(cfg, i, models)
        stem = f"{i:05d}"
        write_ppm(out / "images" / f"{stem}.ppm", scene.image)
        write_raw(out / "depth" / f"{stem}.raw", scene.render.depth)
        write_raw(out / "mask" / f"{stem}.raw", scene.render.mask.astype(np.uint8))
        records.append(ManifestRecord(f"images/{stem}.ppm", scene.annotations, scene.K,
                                      f"depth/{stem}.raw", f"mask/{stem}.raw"))
    (out / "manifest.jsonl").write_text("".join(r.to_json() + "\n" for r in records))
    (out / "scene.cfg").write_text(dump_config(cfg))
    return Dataset(out, records, models)


def read_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise DataError(f"no manifest.jsonl in {root}")
    records = [ManifestRecord.from_json(line) for line in manifest.read_text().splitlines() if line.strip()]
    for r in records:
        if not (root / r.image).is_file():
            raise DataError(f"manifest references missing image {r.image}")
    models = [load_obj(p) for p in sorted((root / "models").glob("*.obj"))]
    models.sort(key=lambda m: m.id)
    if [m.id for m in models] != list(range(len(models))):
        raise DataError("model ids must be 0..C-1")
    for r in records:
        for c, _ in r.objects:
            if not 0 <= c < len(models):
                raise DataError(f"manifest class {c} has no model")
    return Dataset(root, records, models)


# --- flat key=value configs ------------------------------------------------

def _parse_value(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(raw)
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if current and not isinstance(current[0], str):
            return tuple(type(current[0])(p) for p in parts)
        return tuple(parts)
    return type(current)(raw)


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_pairs(cls, pairs: dict[str, str], prefix: str = "", ignore=()):
    """Build dataclass ``cls`` from the string pairs whose keys start with ``prefix``.

    Keys starting with any prefix in ``ignore`` belong to another config
    and are skipped; anything else unknown is an error.
    """
    default = cls()
    names = {f.name for f in fields(cls)}
    kw = {}
    for key, raw in pairs.items():
        if any(key.startswith(p) for p in ignore if p) or not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            raise ConfigurationError(f"unknown config key {key!r}")
        current = getattr(default, name)
        try:
            kw[name] = _parse_value(raw, current)
        except ValueError as e:
            raise ConfigurationError(f"bad value for {key!r}: {raw!r}") from e
    return cls(**kw)


def dump_config(cfg, prefix: str = "") -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        text = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        lines.append(f"{prefix}{f.name} = {text}")
    return "\n".join(lines) + "\n"
