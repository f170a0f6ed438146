"""Pinhole camera helpers. Conventions: x right, y down, z forward (world and camera);
poses map world to camera, ``X_cam = R @ X_world + t``."""

from __future__ import annotations

import numpy as np


def intrinsics_matrix(focal: float, principal: tuple[float, float]) -> np.ndarray:
    cx, cy = principal
    return np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])


def camera_center(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    return -R.T @ t


def rotation_yaw_pitch(yaw: float, pitch: float) -> np.ndarray:
    """World-to-camera rotation for a camera turned by ``yaw`` (about y, positive = right)
    and ``pitch`` (about x, positive = up), radians."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    # camera-to-world: yaw then pitch
    Ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return (Ry @ Rx).T


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Homogeneous pixel coordinates (H, W, 3); pixel (row, col) sits at u=col, v=row."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([u, v, np.ones_like(u)], axis=-1)


def ray_directions(K: np.ndarray, R: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-space ray directions (H, W, 3) and per-pixel ``|K^-1 p|``."""
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("singular intrinsics")
    cam = pixel_grid(height, width) @ np.linalg.inv(K).T
    norm = np.linalg.norm(cam, axis=-1)
    world = cam @ R  # row-vector form of R^T @ d
    return world / norm[..., None], norm


def plucker_rays(K: np.ndarray, R: np.ndarray, t: np.ndarray, height: int, width: int) -> np.ndarray:
    """Per-pixel Plucker coordinates (H, W, 6): unit direction d, then moment o x d."""
    K = np.asarray(K, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("singular intrinsics")
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
        raise ValueError("rotation is not orthonormal")
    d, _ = ray_directions(K, R, height, width)
    o = camera_center(R, np.asarray(t, dtype=np.float64))
    m = np.cross(np.broadcast_to(o, d.shape), d)
    return np.concatenate([d, m], axis=-1)


def project(K: np.ndarray, R: np.ndarray, t: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (..., 3) to pixels (..., 2); also returns camera-frame depth."""
    cam = X @ R.T + t
    z = cam[..., 2]
    uvw = cam @ K.T
    return uvw[..., :2] / z[..., None], z
