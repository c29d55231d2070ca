"""Object models: triangle meshes, sampled surface points and symmetry sets."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .exceptions import DataError
from .geometry import IDENTITY_QUAT, Pose, axis_angle_to_quat, quat_multiply

DEFAULT_COLOR = (0.8, 0.8, 0.8)


def point_set_diameter(points) -> float:
    """Maximum pairwise distance, computed exactly (hull vertices for large sets)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    if len(pts) > 2000:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    return float(pdist(pts).max())


def sample_surface_points(vertices, faces, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=int)
    rng = np.random.default_rng(seed)
    tri = vertices[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    idx = rng.choice(len(faces), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = tri[idx, 0], tri[idx, 1], tri[idx, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


@dataclass
class ObjectModel:
    """A known object: mesh for rendering, surface points for losses and metrics.

    ``id`` is the zero-based class index used by the proposal grids.
    ``symmetries`` are model-frame transforms ``S`` such that the object at
    pose ``P @ S`` looks identical to ``P``; the identity is always included.
    """

    id: int
    points: np.ndarray
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=int))
    face_colors: np.ndarray | None = None
    symmetries: list[Pose] = field(default_factory=list)
    is_symmetric: bool = False
    name: str = ""
    diameter: float = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=int).reshape(-1, 3)
        if len(self.points) < 4:
            raise DataError(f"object model needs at least 4 points, got {len(self.points)}")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataError("face index out of range")
        if self.face_colors is None:
            self.face_colors = np.tile(DEFAULT_COLOR, (len(self.faces), 1))
        self.face_colors = np.asarray(self.face_colors, dtype=float).reshape(-1, 3)
        if len(self.face_colors) != len(self.faces):
            raise DataError("need one color per face")
        if not any(np.allclose(s.matrix(), np.eye(4)) for s in self.symmetries):
            self.symmetries = [Pose(), *self.symmetries]
        self.diameter = point_set_diameter(self.points)

    @classmethod
    def from_mesh(cls, id: int, vertices, faces, n_points: int = 256, seed: int = 0, **kw) -> "ObjectModel":
        points = sample_surface_points(vertices, faces, n_points, seed)
        return cls(id=id, points=points, vertices=vertices, faces=faces, **kw)

    @property
    def bound_points(self) -> np.ndarray:
        """Points whose projection bounds every rendered pixel."""
        return self.vertices if len(self.faces) else self.points


# --- procedural meshes -----------------------------------------------------

def cube_mesh(side: float = 0.06):
    h = side / 2
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return v, np.array(faces)


def tetrahedron_mesh(size: float = 0.08):
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) * size / (2 * np.sqrt(2))
    faces = np.array([(0, 1, 2), (0, 3, 1), (0, 2, 3), (1, 3, 2)])
    return v, faces


def l_prism_mesh(size: float = 0.07, depth: float = 0.03):
    s = size
    outline = np.array([[0, 0], [s, 0], [s, s / 3], [s / 3, s / 3], [s / 3, s], [0, s]])
    outline = outline - outline.mean(axis=0)
    n = len(outline)
    z0, z1 = -depth / 2, depth / 2
    v = np.concatenate([np.c_[outline, np.full(n, z0)], np.c_[outline, np.full(n, z1)]])
    # the L outline is star-shaped from vertex 3 (inner corner)
    cap = [(3, i, (i + 1) % n) for i in range(n) if 3 not in (i, (i + 1) % n)]
    faces = [(a, c, b) for a, b, c in cap] + [(a + n, b + n, c + n) for a, b, c in cap]
    for i in range(n):
        j = (i + 1) % n
        faces += [(i, j, j + n), (i, j + n, i + n)]
    return v, np.array(faces)


def icosphere_mesh(radius: float = 0.04, subdivisions: int = 1):
    t = (1 + np.sqrt(5)) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts) * radius, np.array(faces)


PALETTE = np.array([
    [0.90, 0.20, 0.20], [0.20, 0.75, 0.25], [0.20, 0.35, 0.90], [0.95, 0.85, 0.20],
    [0.85, 0.30, 0.85], [0.20, 0.85, 0.85], [0.95, 0.55, 0.15], [0.55, 0.35, 0.20],
])


def sampled_axis_symmetries(axis, count: int = 64) -> list[Pose]:
    """Discrete sampling of a continuous rotational symmetry about ``axis``."""
    return [Pose(axis_angle_to_quat(axis, 2 * np.pi * k / count)) for k in range(count)]


def sampled_sphere_symmetries(count: int = 64) -> list[Pose]:
    """Deterministic spread of rotations approximating full SO(3) symmetry."""
    out = [Pose()]
    golden = np.pi * (3 - np.sqrt(5))
    for k in range(1, count):
        z = 1 - 2 * (k + 0.5) / count
        r = np.sqrt(1 - z * z)
        axis = np.array([r * np.cos(golden * k), r * np.sin(golden * k), z])
        angle = np.pi * ((k * 0.618034) % 1.0)
        out.append(Pose(quat_multiply(axis_angle_to_quat(axis, angle), IDENTITY_QUAT)))
    return out


PROCEDURAL = {
    "cube": cube_mesh,
    "tetrahedron": tetrahedron_mesh,
    "l_prism": l_prism_mesh,
    "sphere": icosphere_mesh,
}


def make_object(name: str, id: int, n_points: int = 256, seed: int = 0,
                n_sym_samples: int = 64) -> ObjectModel:
    """One of the built-in procedural objects.

    Faces of the polyhedra get distinct palette colors so every pose is
    visually unique; the sphere is uniformly colored and declared
    symmetric.
    """
    if name not in PROCEDURAL:
        raise DataError(f"unknown procedural object {name!r}; choose from {sorted(PROCEDURAL)}")
    v, f = PROCEDURAL[name]()
    if name == "sphere":
        colors = np.tile([0.85, 0.75, 0.35], (len(f), 1))
        return ObjectModel.from_mesh(id, v, f, n_points, seed, face_colors=colors, name=name,
                                     symmetries=sampled_sphere_symmetries(n_sym_samples),
                                     is_symmetric=True)
    if name == "cube":
        colors = PALETTE[np.arange(len(f)) // 2 % len(PALETTE)]
    else:
        colors = PALETTE[np.arange(len(f)) % len(PALETTE)]
    return ObjectModel.from_mesh(id, v, f, n_points, seed, face_colors=colors, name=name)


# --- OBJ subset -----------------------------------------------------------
# v/f lines (triangles only) plus "#@" directives:
#   #@ id <int>            #@ name <str>        #@ points <n> <seed>
#   #@ fc <r> <g> <b>      one per face, in face order
#   #@ sym <w> <x> <y> <z> <tx> <ty> <tz>
#   #@ symmetric

def load_obj(path, n_points: int | None = None, seed: int | None = None) -> ObjectModel:
    path = Path(path)
    verts, faces, colors, syms = [], [], [], []
    meta = {"id": 0, "name": path.stem, "symmetric": False, "points": 256, "seed": 0}
    try:
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise DataError(f"{path}:{lineno}: only triangle faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            elif parts[0] == "#@" and len(parts) > 1:
                key, args = parts[1], parts[2:]
                if key == "id":
                    meta["id"] = int(args[0])
                elif key == "name":
                    meta["name"] = " ".join(args)
                elif key == "points":
                    meta["points"] = int(args[0])
                    if len(args) > 1:
                        meta["seed"] = int(args[1])
                elif key == "fc":
                    colors.append([float(x) for x in args[:3]])
                elif key == "sym":
                    vals = [float(x) for x in args]
                    syms.append(Pose(vals[:4], vals[4:7]))
                elif key == "symmetric":
                    meta["symmetric"] = True
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed OBJ file {path}: {exc}") from exc
    if not faces:
        raise DataError(f"{path}: no faces")
    return ObjectModel.from_mesh(
        meta["id"], np.array(verts), np.array(faces),
        n_points=n_points if n_points is not None else meta["points"],
        seed=seed if seed is not None else meta["seed"],
        face_colors=np.array(colors) if colors else None,
        symmetries=syms, is_symmetric=meta["symmetric"], name=meta["name"],
    )


def save_obj(model: ObjectModel, path, n_points: int | None = None, seed: int = 0) -> None:
    lines = [f"#@ id {model.id}", f"#@ name {model.name or 'object'}",
             f"#@ points {n_points or len(model.points)} {seed}"]
    if model.is_symmetric:
        lines.append("#@ symmetric")
    for s in model.symmetries:
        if np.allclose(s.matrix(), np.eye(4)):
            continue
        lines.append("#@ sym " + " ".join(repr(float(x)) for x in (*s.quat, *s.t)))
    lines += ["v " + " ".join(repr(float(x)) for x in v) for v in model.vertices]
    for f, c in zip(model.faces, model.face_colors):
        lines.append("f " + " ".join(str(i + 1) for i in f))
        lines.append("#@ fc " + " ".join(repr(float(x)) for x in c))
    Path(path).write_text("\n".join(lines) + "\n")
