"""Pinhole cameras: per-pixel rays, projection of world points, surround rigs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    dir: np.ndarray


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        pose = np.array(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        pose.setflags(write=False)
        object.__setattr__(self, "cam_to_world", pose)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        R = pose[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("cam_to_world rotation must be orthonormal with det +1")
        if not np.allclose(pose[3], [0, 0, 0, 1]):
            raise ValueError("cam_to_world must be a rigid 4x4 transform")

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3].copy()

    def translated(self, offset: Sequence[float]) -> "Camera":
        pose = self.cam_to_world.copy()
        pose[:3, 3] += np.asarray(offset, dtype=np.float64)
        return Camera(self.fx, self.fy, self.cx, self.cy, pose, self.width, self.height)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "cam_to_world": [float(x) for x in self.cam_to_world.reshape(-1)],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.asarray(d["cam_to_world"], dtype=np.float64).reshape(4, 4),
                   int(d["width"]), int(d["height"]))


def pixel_to_ray(cam: Camera, u: float, v: float) -> Ray:
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ValueError(f"non-finite pixel coordinate ({u}, {v})")
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    d = cam.rotation @ d_cam
    return Ray(cam.center, d / np.linalg.norm(d))


def pixel_rays(cam: Camera, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`pixel_to_ray`; returns ``(origins, dirs)`` of shape ``(n, 3)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise ValueError("non-finite pixel coordinates")
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(cam.center, d.shape).copy(), d


def pixel_centers(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """All pixel centers in row-major order (``v`` slow, ``u`` fast)."""
    vv, uu = np.meshgrid(np.arange(cam.height) + 0.5, np.arange(cam.width) + 0.5, indexing="ij")
    return uu.reshape(-1), vv.reshape(-1)


def project_point(cam: Camera, p: Sequence[float]) -> Optional[tuple[float, float, float]]:
    """Project a world point; ``None`` when it is behind the camera or off-image."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = cam.rotation.T @ (p - cam.center)
    if z <= 1e-6:
        return None
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return float(u), float(v), float(z)


def look_rotation(forward: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for an optical axis ``forward`` (camera x right, y down, z forward)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def make_surround_rig(n_cams: int, radius: float, height: float, fx: float, fy: float,
                      width: int, image_height: int, cx: Optional[float] = None,
                      cy: Optional[float] = None, center: Sequence[float] = (0.0, 0.0),
                      pitch_deg: float = 0.0) -> list[Camera]:
    """Cameras at equal yaw spacing looking outward from ``center``, tilted down by ``pitch_deg``."""
    if n_cams < 1:
        raise ValueError("need at least one camera")
    cx = width / 2.0 if cx is None else cx
    cy = image_height / 2.0 if cy is None else cy
    cams = []
    for i in range(n_cams):
        yaw = 2.0 * math.pi * i / n_cams
        fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        tilt = math.radians(pitch_deg)
        axis = np.array([math.cos(tilt) * fwd[0], math.cos(tilt) * fwd[1], -math.sin(tilt)])
        pose = np.eye(4)
        pose[:3, :3] = look_rotation(axis)
        pose[:3, 3] = [center[0] + radius * fwd[0], center[1] + radius * fwd[1], height]
        cams.append(Camera(fx, fy, cx, cy, pose, width, image_height))
    return cams


def camera_yaw(cam: Camera) -> float:
    f = cam.rotation[:, 2]
    return math.atan2(f[1], f[0]) % (2.0 * math.pi)


def save_rig(cams: Sequence[Camera], path: str | Path) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cams], indent=2) + "\n")


def load_rig(path: str | Path) -> list[Camera]:
    return [Camera.from_json(d) for d in json.loads(Path(path).read_text())]
