"""Scene representation: Gaussian splats, cameras, point lights.

Storage is struct-of-arrays (`GaussianCloud`) with every constrained
attribute kept in unconstrained form (logit for [0,1] ranges, log for
scales, free quaternion / normal vectors) so the optimizer never needs a
projection step.  Constrained values exist only on the read path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .validation import as_float_array, check_positive, check_unit, normalize

VIS_SH_DEGREE = 2
VIS_SH_COEFFS = (VIS_SH_DEGREE + 1) ** 2  # 9
SCALE_FLOOR = 1e-6
LOGIT_EPS = 1e-6

# Real orthonormal spherical-harmonic constants, degree <= 2.
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2A = 1.0925484305920792
_SH_C2B = 0.31539156525252005
_SH_C2C = 0.5462742152960396


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(p) - np.log1p(-p)


def quat_normalize(q):
    return normalize(np.asarray(q, dtype=np.float64))


def quat_to_rotmat(q):
    """Unit quaternion(s) (w, x, y, z) to rotation matrix, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotmat_jacobian(q):
    """d R / d q for unit quaternion(s), shape (..., 3, 3, 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    J = np.empty(q.shape[:-1] + (3, 3, 4))
    J[..., 0, 0, :] = np.stack([zero, zero, -4 * y, -4 * z], axis=-1)
    J[..., 0, 1, :] = np.stack([-2 * z, 2 * y, 2 * x, -2 * w], axis=-1)
    J[..., 0, 2, :] = np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=-1)
    J[..., 1, 0, :] = np.stack([2 * z, 2 * y, 2 * x, 2 * w], axis=-1)
    J[..., 1, 1, :] = np.stack([zero, -4 * x, zero, -4 * z], axis=-1)
    J[..., 1, 2, :] = np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=-1)
    J[..., 2, 0, :] = np.stack([-2 * y, 2 * z, -2 * w, 2 * x], axis=-1)
    J[..., 2, 1, :] = np.stack([2 * x, 2 * w, 2 * z, 2 * y], axis=-1)
    J[..., 2, 2, :] = np.stack([zero, -4 * x, -4 * y, zero], axis=-1)
    return J


def build_covariance(q, s):
    """3D covariance R diag(s)^2 R^T from unit quaternion(s) and scale(s).

    Batched: q (..., 4), s (..., 3) -> (..., 3, 3).
    """
    s = np.asarray(s, dtype=np.float64)
    R = quat_to_rotmat(q)
    RS = R * (s[..., None, :] ** 2)
    return RS @ np.swapaxes(R, -1, -2)


def eval_density(g: "Gaussian", x) -> float:
    """Unnormalized Gaussian density exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))."""
    x = as_float_array(x, shape=(3,), name="x")
    cov = build_covariance(g.rotation, g.scale)
    try:
        sol = np.linalg.solve(cov, x - g.position)
    except np.linalg.LinAlgError as e:
        raise InvalidGaussianError(f"degenerate covariance: {e}") from e
    return float(np.exp(-0.5 * (x - g.position) @ sol))


def sh_basis(dirs):
    """Real SH basis values up to degree 2 at unit direction(s): (..., 9)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (VIS_SH_COEFFS,))
    out[..., 0] = _SH_C0
    out[..., 1] = _SH_C1 * y
    out[..., 2] = _SH_C1 * z
    out[..., 3] = _SH_C1 * x
    out[..., 4] = _SH_C2A * x * y
    out[..., 5] = _SH_C2A * y * z
    out[..., 6] = _SH_C2B * (3.0 * z * z - 1.0)
    out[..., 7] = _SH_C2A * x * z
    out[..., 8] = _SH_C2C * (x * x - y * y)
    return out


def sh_basis_grad(dirs):
    """Gradient of each basis function w.r.t. the direction: (..., 9, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    g = np.empty(d.shape[:-1] + (VIS_SH_COEFFS, 3))
    g[..., 0, :] = 0.0
    g[..., 1, :] = np.stack([zero, np.full_like(x, _SH_C1), zero], axis=-1)
    g[..., 2, :] = np.stack([zero, zero, np.full_like(x, _SH_C1)], axis=-1)
    g[..., 3, :] = np.stack([np.full_like(x, _SH_C1), zero, zero], axis=-1)
    g[..., 4, :] = _SH_C2A * np.stack([y, x, zero], axis=-1)
    g[..., 5, :] = _SH_C2A * np.stack([zero, z, y], axis=-1)
    g[..., 6, :] = _SH_C2B * np.stack([zero, zero, 6.0 * z], axis=-1)
    g[..., 7, :] = _SH_C2A * np.stack([z, zero, x], axis=-1)
    g[..., 8, :] = _SH_C2C * np.stack([2.0 * x, -2.0 * y, zero], axis=-1)
    return g


def eval_sh(coeffs, dirs):
    """Evaluate an SH expansion at unit direction(s); broadcasts over batch."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return np.sum(sh_basis(dirs) * coeffs, axis=-1)


def visibility_sh_init(value: float = 1.0) -> np.ndarray:
    """Degree-0 coefficients giving a direction-independent visibility."""
    c = np.zeros(VIS_SH_COEFFS)
    c[0] = value / _SH_C0
    return c


class InvalidGaussianError(ValueError):
    pass


@dataclass
class Gaussian:
    """One splat with user-facing (constrained) attribute values."""

    position: np.ndarray  # (3,) scene units
    rotation: np.ndarray  # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray  # (3,) positive, scene units
    opacity: float  # (0, 1)
    basecolor: np.ndarray  # (3,) in [0, 1]
    roughness: float  # [0, 1]
    metalness: float  # [0, 1]
    subsurfaceness: float  # [0, 1]
    normal: np.ndarray  # (3,) unit
    vis_sh: np.ndarray = field(default_factory=visibility_sh_init)  # (9,)

    def __post_init__(self):
        self.position = as_float_array(self.position, (3,), "position")
        self.rotation = as_float_array(self.rotation, (4,), "rotation")
        self.scale = as_float_array(self.scale, (3,), "scale")
        self.basecolor = as_float_array(self.basecolor, (3,), "basecolor")
        self.normal = as_float_array(self.normal, (3,), "normal")
        self.vis_sh = as_float_array(self.vis_sh, (VIS_SH_COEFFS,), "vis_sh")
        check_unit(self.rotation, "rotation")
        check_unit(self.normal, "normal")
        check_positive(self.scale, "scale")
        for name in ("opacity", "roughness", "metalness", "subsurfaceness"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}: {v} outside [0, 1]")


@dataclass
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = as_float_array(self.lo, (3,), "lo")
        self.hi = as_float_array(self.hi, (3,), "hi")

    @classmethod
    def from_points(cls, pts, margin: float = 0.0) -> "Aabb":
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return cls(pts.min(axis=0) - margin, pts.max(axis=0) + margin)

    def contains(self, pts) -> bool:
        pts = np.asarray(pts, dtype=np.float64)
        return bool(np.all(pts >= self.lo) and np.all(pts <= self.hi))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_extent(self) -> np.ndarray:
        return np.maximum(0.5 * (self.hi - self.lo), 1e-9)


# Per-Gaussian parameter arrays, all stored unconstrained.
_CLOUD_FIELDS = (
    ("positions", 3),
    ("rotations", 4),
    ("log_scales", 3),
    ("opacity_logits", 1),
    ("basecolor_logits", 3),
    ("roughness_logits", 1),
    ("metalness_logits", 1),
    ("subsurface_logits", 1),
    ("normals", 3),
    ("vis_sh", VIS_SH_COEFFS),
)


@dataclass
class GaussianCloud:
    """Unconstrained per-Gaussian parameter arrays (the optimizer's view)."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    basecolor_logits: np.ndarray
    roughness_logits: np.ndarray
    metalness_logits: np.ndarray
    subsurface_logits: np.ndarray
    normals: np.ndarray
    vis_sh: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        for name, width in _CLOUD_FIELDS:
            shape = (n,) if width == 1 else (n, width)
            setattr(self, name, as_float_array(getattr(self, name), shape, name))

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls, n: int) -> "GaussianCloud":
        kw = {}
        for name, width in _CLOUD_FIELDS:
            kw[name] = np.zeros((n,) if width == 1 else (n, width))
        return cls(**kw)

    # --- read path: constrained values -------------------------------------
    def unit_rotations(self):
        return quat_normalize(self.rotations)

    def scales(self):
        return np.maximum(np.exp(self.log_scales), SCALE_FLOOR)

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def basecolors(self):
        return sigmoid(self.basecolor_logits)

    def roughnesses(self):
        return sigmoid(self.roughness_logits)

    def metalnesses(self):
        return sigmoid(self.metalness_logits)

    def subsurfaceness(self):
        return sigmoid(self.subsurface_logits)

    def unit_normals(self):
        return normalize(self.normals)

    def covariances(self):
        return build_covariance(self.unit_rotations(), self.scales())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name, _ in _CLOUD_FIELDS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.param_arrays().items()})

    def take(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{k: v[idx].copy() for k, v in self.param_arrays().items()})

    @classmethod
    def concatenate(cls, parts) -> "GaussianCloud":
        kw = {
            name: np.concatenate([getattr(p, name) for p in parts], axis=0)
            for name, _ in _CLOUD_FIELDS
        }
        return cls(**kw)


@dataclass
class Scene:
    """Gaussian cloud plus the fixed bounds used for position encoding.

    Bounds must contain every center at construction time; the training
    loop prunes Gaussians that wander out so the invariant keeps holding.
    """

    cloud: GaussianCloud
    bounds: Aabb

    def __len__(self) -> int:
        return len(self.cloud)

    def validate(self) -> None:
        if not self.bounds.contains(self.cloud.positions):
            raise ValueError("scene bounds must contain all Gaussian centers")

    @classmethod
    def from_gaussians(cls, gaussians, bounds: Aabb | None = None) -> "Scene":
        gaussians = list(gaussians)
        if not gaussians:
            raise ValueError("scene needs at least one Gaussian")
        n = len(gaussians)
        cloud = GaussianCloud.empty(n)
        for i, g in enumerate(gaussians):
            cloud.positions[i] = g.position
            cloud.rotations[i] = g.rotation
            cloud.log_scales[i] = np.log(np.maximum(g.scale, SCALE_FLOOR))
            cloud.opacity_logits[i] = logit(g.opacity)
            cloud.basecolor_logits[i] = logit(g.basecolor)
            cloud.roughness_logits[i] = logit(g.roughness)
            cloud.metalness_logits[i] = logit(g.metalness)
            cloud.subsurface_logits[i] = logit(g.subsurfaceness)
            cloud.normals[i] = g.normal
            cloud.vis_sh[i] = g.vis_sh
        if bounds is None:
            bounds = Aabb.from_points(cloud.positions, margin=1e-6)
        scene = cls(cloud, bounds)
        scene.validate()
        return scene

    def gaussian(self, i: int) -> Gaussian:
        c = self.cloud
        return Gaussian(
            position=c.positions[i],
            rotation=c.unit_rotations()[i],
            scale=c.scales()[i],
            opacity=float(c.opacities()[i]),
            basecolor=c.basecolors()[i],
            roughness=float(c.roughnesses()[i]),
            metalness=float(c.metalnesses()[i]),
            subsurfaceness=float(c.subsurfaceness()[i]),
            normal=c.unit_normals()[i],
            vis_sh=c.vis_sh[i].copy(),
        )

    @property
    def gaussians(self):
        return [self.gaussian(i) for i in range(len(self))]


@dataclass
class Camera:
    """Pinhole camera; ``world_to_cam`` is a rigid 4x4, +z looks forward."""

    world_to_cam: np.ndarray  # (4, 4)
    focal: tuple[float, float]  # (fx, fy) pixels
    principal: tuple[float, float]  # (cx, cy) pixels
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        self.world_to_cam = as_float_array(self.world_to_cam, (4, 4), "world_to_cam")
        if min(self.resolution) <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if min(self.focal) <= 0:
            raise ValueError(f"focal must be positive, got {self.focal}")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def cam_to_world_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.translation) @ self.rotation

    def replace(self, **kw) -> "Camera":
        return dataclasses.replace(self, **kw)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), focal=None, resolution=(256, 256),
                fov_deg: float | None = None) -> "Camera":
        """Camera at ``eye`` looking toward ``target``; +z forward, +y down."""
        eye = as_float_array(eye, (3,), "eye")
        target = as_float_array(target, (3,), "target")
        fwd = normalize(target - eye)
        right = normalize(np.cross(fwd, as_float_array(up, (3,), "up")))
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        width, height = resolution
        if focal is None:
            if fov_deg is None:
                fov_deg = 50.0
            f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
            focal = (f, f)
        return cls(w2c, focal=focal, principal=(width / 2.0, height / 2.0),
                   resolution=resolution)


@dataclass
class PointLight:
    position: np.ndarray  # (3,)
    intensity: float = 1.0  # >= 0, white light

    def __post_init__(self):
        self.position = as_float_array(self.position, (3,), "position")
        if self.intensity < 0:
            raise ValueError(f"intensity must be >= 0, got {self.intensity}")
