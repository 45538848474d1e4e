"""Camera geometry and bird's-eye-view (BeV) pooling.

A pinhole camera lifts image features onto a frustum of 3D points in the
vehicle frame (one point per depth bin per feature pixel), and a sum-pooling
op splats those points onto a metric BeV grid.  The camera math is plain
numpy (nothing here needs gradients); `lift` and `pool_to_bev` operate on
torch tensors because they sit on the training path.

Vehicle frame convention: x = forward, y = right, z = up.  The BeV grid
lives in the (x, y) ground plane; the raster's first axis runs along x.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

_RIGID_ATOL = 1e-6


@dataclass
class CameraModel:
    """Pinhole camera with a rigid mount and a fixed set of depth bins.

    intrinsics: 3x3 invertible matrix K mapping camera coords to pixels.
    cam_to_vehicle: 4x4 rigid transform M (rotation block orthonormal,
        det +1) taking camera-frame points to the vehicle frame.
    depth_bins: strictly increasing depth values (metres), at least two.
    image_size: (H, W) of the raw image in pixels.
    feature_size: (H_e, W_e) of the encoder feature map; each feature cell
        is anchored at the pixel centre of its stride patch.
    """

    intrinsics: np.ndarray
    cam_to_vehicle: np.ndarray
    depth_bins: np.ndarray
    image_size: tuple[int, int]
    feature_size: tuple[int, int]

    def __post_init__(self) -> None:
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.cam_to_vehicle = np.asarray(self.cam_to_vehicle, dtype=np.float64)
        self.depth_bins = np.asarray(self.depth_bins, dtype=np.float64)
        if self.intrinsics.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {self.intrinsics.shape}")
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise ValueError("intrinsics matrix is singular")
        if self.cam_to_vehicle.shape != (4, 4):
            raise ValueError(f"cam_to_vehicle must be 4x4, got {self.cam_to_vehicle.shape}")
        rot = self.cam_to_vehicle[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=_RIGID_ATOL):
            raise ValueError("cam_to_vehicle rotation block is not orthonormal")
        if not np.isclose(np.linalg.det(rot), 1.0, atol=_RIGID_ATOL):
            raise ValueError("cam_to_vehicle rotation must have det +1")
        if not np.allclose(self.cam_to_vehicle[3], [0.0, 0.0, 0.0, 1.0], atol=_RIGID_ATOL):
            raise ValueError("cam_to_vehicle last row must be [0, 0, 0, 1]")
        if self.depth_bins.ndim != 1 or self.depth_bins.size < 2:
            raise ValueError("depth_bins must be a 1-D array with at least two bins")
        if not np.all(np.diff(self.depth_bins) > 0):
            raise ValueError("depth_bins must be strictly increasing")
        h, w = self.image_size
        he, we = self.feature_size
        if h <= 0 or w <= 0 or he <= 0 or we <= 0:
            raise ValueError("image_size and feature_size must be positive")
        if h % he or w % we:
            raise ValueError(
                f"feature_size {self.feature_size} must evenly divide image_size {self.image_size}"
            )

    @property
    def num_depth_bins(self) -> int:
        return int(self.depth_bins.size)

    @property
    def position(self) -> np.ndarray:
        """Camera origin in the vehicle frame."""
        return self.cam_to_vehicle[:3, 3]

    def feature_pixel_coords(self) -> np.ndarray:
        """(H_e, W_e, 2) array of (u, v) pixel centres for each feature cell."""
        h, w = self.image_size
        he, we = self.feature_size
        sy, sx = h / he, w / we
        v = (np.arange(he, dtype=np.float64) + 0.5) * sy
        u = (np.arange(we, dtype=np.float64) + 0.5) * sx
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv], axis=-1)


def unproject_pixels(cam: CameraModel, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Map pixels (..., 2) at given depths (...,) to vehicle-frame points (..., 3).

    A pixel at depth d maps to M . (d . K^-1 . [u, v, 1]^T).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    ones = np.ones(pixels.shape[:-1] + (1,))
    homog = np.concatenate([pixels, ones], axis=-1)
    rays = homog @ np.linalg.inv(cam.intrinsics).T
    p_cam = rays * depths[..., None]
    rot = cam.cam_to_vehicle[:3, :3]
    return p_cam @ rot.T + cam.cam_to_vehicle[:3, 3]


def project_points(cam: CameraModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map vehicle-frame points (..., 3) back to pixels (..., 2) and depths (...,).

    Exact inverse of `unproject_pixels` for any invertible K: with
    p_cam = d . K^-1 . [u, v, 1]^T we get K . p_cam = d . [u, v, 1]^T, so the
    third homogeneous component recovers d and the ratio recovers the pixel.
    """
    points = np.asarray(points, dtype=np.float64)
    rot = cam.cam_to_vehicle[:3, :3]
    p_cam = (points - cam.cam_to_vehicle[:3, 3]) @ rot
    w = p_cam @ cam.intrinsics.T
    depth = w[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = w[..., :2] / depth[..., None]
    return pix, depth


def build_frustum(cam: CameraModel) -> np.ndarray:
    """(D, H_e, W_e, 3) vehicle-frame points for every (depth bin, feature cell)."""
    coords = cam.feature_pixel_coords()  # (H_e, W_e, 2)
    he, we = cam.feature_size
    d = cam.num_depth_bins
    pixels = np.broadcast_to(coords, (d, he, we, 2))
    depths = np.broadcast_to(cam.depth_bins[:, None, None], (d, he, we))
    return unproject_pixels(cam, pixels, depths)


@dataclass
class BevGridSpec:
    """Metric BeV raster in the vehicle ground plane.

    shape: (n_x, n_y) cells; the raster's first axis runs along vehicle x
        (forward), the second along vehicle y (right).
    resolution: cell edge length in metres.
    origin: vehicle-frame (x, y) of the corner of cell (0, 0).
    """

    shape: tuple[int, int]
    resolution: float
    origin: tuple[float, float]

    def __post_init__(self) -> None:
        nx, ny = self.shape
        if nx <= 0 or ny <= 0:
            raise ValueError("grid shape must be positive")
        if self.resolution <= 0:
            raise ValueError("grid resolution must be positive")

    @property
    def extent(self) -> tuple[float, float]:
        """Physical size (metres) along (x, y)."""
        return (self.shape[0] * self.resolution, self.shape[1] * self.resolution)

    def cell_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cells for vehicle-frame points (..., 2 or 3) plus an in-bounds mask.

        Assignment is floor((coord - origin) / resolution); points outside
        the raster are flagged False. z, if present, is ignored.
        """
        points = np.asarray(points, dtype=np.float64)
        ix = np.floor((points[..., 0] - self.origin[0]) / self.resolution).astype(np.int64)
        iy = np.floor((points[..., 1] - self.origin[1]) / self.resolution).astype(np.int64)
        ok = (ix >= 0) & (ix < self.shape[0]) & (iy >= 0) & (iy < self.shape[1])
        return ix, iy, ok

    def cell_centers(self) -> np.ndarray:
        """(n_x, n_y, 2) vehicle-frame coordinates of cell centres."""
        x = self.origin[0] + (np.arange(self.shape[0]) + 0.5) * self.resolution
        y = self.origin[1] + (np.arange(self.shape[1]) + 0.5) * self.resolution
        xx, yy = np.meshgrid(x, y, indexing="ij")
        return np.stack([xx, yy], axis=-1)


@dataclass
class LiftedFeatures:
    """Frustum point cloud carrying features.

    values: (..., C, D, H_e, W_e) tensor, values[..., c, d, i, j] is the
        feature mass channel c puts at frustum point (d, i, j).
    positions: (D, H_e, W_e, 3) vehicle-frame coordinates of those points.
    """

    values: torch.Tensor
    positions: torch.Tensor = field(repr=False)

    def __post_init__(self) -> None:
        if self.values.shape[-3:] != self.positions.shape[:-1]:
            raise ValueError(
                f"values trailing dims {tuple(self.values.shape[-3:])} must match "
                f"positions grid {tuple(self.positions.shape[:-1])}"
            )


def lift(features: torch.Tensor, depth_dist: torch.Tensor, cam: CameraModel) -> LiftedFeatures:
    """Spread features over the frustum weighted by the depth distribution.

    features: (..., C, H_e, W_e); depth_dist: (..., D, H_e, W_e) with
    softmax-normalised depth bins per feature cell.  The outer product
    conserves mass: sum_d values[c, d, i, j] = features[c, i, j] whenever
    sum_d depth_dist[d, i, j] = 1.
    """
    he, we = cam.feature_size
    if features.shape[-2:] != (he, we):
        raise ValueError(f"features spatial dims {tuple(features.shape[-2:])} != {cam.feature_size}")
    if depth_dist.shape[-3:] != (cam.num_depth_bins, he, we):
        raise ValueError("depth_dist dims do not match camera depth bins / feature size")
    values = features.unsqueeze(-3) * depth_dist.unsqueeze(-4)
    positions = torch.as_tensor(build_frustum(cam), dtype=features.dtype, device=features.device)
    return LiftedFeatures(values=values, positions=positions)


def _flat_cell_index(positions: torch.Tensor, grid: BevGridSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Flattened raster index per frustum point plus validity mask."""
    ix, iy, ok = grid.cell_index(positions.detach().cpu().numpy())
    flat = torch.from_numpy(ix * grid.shape[1] + iy).reshape(-1)
    mask = torch.from_numpy(ok).reshape(-1)
    return flat.to(positions.device), mask.to(positions.device)


def pool_to_bev(lifted: LiftedFeatures, grid: BevGridSpec) -> torch.Tensor:
    """Sum-pool frustum features into the BeV raster, (..., C, n_x, n_y).

    Each point adds its value to the cell containing it; points outside the
    raster are discarded.  Linear in the inputs, adjoint is `pool_adjoint`.
    """
    values = lifted.values
    lead = values.shape[:-3]
    flat_idx, mask = _flat_cell_index(lifted.positions, grid)
    src = values.reshape(lead + (-1,))[..., mask]
    out = values.new_zeros(lead + (grid.shape[0] * grid.shape[1],))
    out = out.index_add(-1, flat_idx[mask], src)
    return out.reshape(lead + grid.shape)


def pool_adjoint(bev: torch.Tensor, positions: torch.Tensor, grid: BevGridSpec) -> torch.Tensor:
    """Adjoint of `pool_to_bev` in its values argument.

    Maps a BeV-shaped tensor (..., C, n_x, n_y) back to frustum shape
    (..., C, D, H_e, W_e): each in-bounds point reads the cell it pools
    into, out-of-bounds points read zero, so <pool(v), b> == <v, adjoint(b)>.
    """
    lead = bev.shape[:-2]
    flat_idx, mask = _flat_cell_index(positions, grid)
    flat_bev = bev.reshape(lead + (-1,))
    n_cells = grid.shape[0] * grid.shape[1]
    gathered = flat_bev[..., flat_idx.clamp(min=0, max=n_cells - 1)]
    gathered = gathered * mask.to(bev.dtype)
    return gathered.reshape(lead + positions.shape[:-1])
