"""Affine self-alignment: localisation net, grid generator and bilinear sampler.

Normalized coordinates run over [-1, 1] on each spatial axis with -1 at the
centre of the first pixel and +1 at the centre of the last one, so the
identity transform samples pixel centres exactly.  Grids store (x, y) in the
last axis, x along width.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, Tensor, _op, note_branch, conv2d, global_avg_pool, linear, relu

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def target_coords(h_out: int, w_out: int, dtype=np.float64) -> np.ndarray:
    """Regular target grid, shape [h_out, w_out, 3] holding (x_t, y_t, 1)."""
    if h_out < 2 or w_out < 2:
        raise ValueError(f"grid extents must be >= 2, got {h_out}x{w_out}")
    xs = np.linspace(-1.0, 1.0, w_out, dtype=dtype)
    ys = np.linspace(-1.0, 1.0, h_out, dtype=dtype)
    out = np.ones((h_out, w_out, 3), dtype=dtype)
    out[..., 0] = xs[None, :]
    out[..., 1] = ys[:, None]
    return out


def generate_grid(theta: Tensor, h_out: int, w_out: int) -> Tensor:
    """Source coordinates for every target pixel: ``theta.reshape(2, 3) @ (x_t, y_t, 1)``.

    ``theta`` is [N, 6] in row-major order (θ11, θ12, θ13, θ21, θ22, θ23).
    Returns [N, h_out, w_out, 2].
    """
    if theta.ndim != 2 or theta.shape[1] != 6:
        raise ValueError(f"theta must be [N, 6], got {theta.shape}")
    base = target_coords(h_out, w_out, theta.data.dtype)
    mats = theta.data.reshape(-1, 2, 3)
    grid = np.einsum("hwk,njk->nhwj", base, mats)
    flat = base.reshape(-1, 3)

    def vjp(g):
        # d grid[n,h,w,j] / d mats[n,j,k] = base[h,w,k]
        gm = np.einsum("npj,pk->njk", g.reshape(g.shape[0], -1, 2), flat)
        return (gm.reshape(-1, 6),)

    return _op(grid, (theta,), vjp, "generate_grid")


def _pixel_coords(norm: np.ndarray, size: int) -> np.ndarray:
    half = (size - 1) / 2.0
    pix = (norm + 1.0) * half
    # Snap round-off so that the identity grid lands exactly on pixel centres.
    near = np.rint(pix)
    tol = 16 * np.finfo(pix.dtype).eps * max(1.0, size)
    return np.where(np.abs(pix - near) <= tol, near, pix), half


def bilinear_sample(u: Tensor, grid: Tensor) -> Tensor:
    """Sample [N,C,H,W] maps at grid [N,h,w,2]; out-of-range neighbours read as zero."""
    if u.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2:
        raise ValueError(f"bad shapes for bilinear_sample: u {u.shape}, grid {grid.shape}")
    n, c, h, w = u.shape
    if grid.shape[0] != n:
        raise ValueError(f"grid batch {grid.shape[0]} does not match input batch {n}")
    ho, wo = grid.shape[1:3]
    dtype = u.data.dtype

    px, hx = _pixel_coords(grid.data[..., 0].astype(dtype), w)
    py, hy = _pixel_coords(grid.data[..., 1].astype(dtype), h)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(dtype)
    fy = (py - y0).astype(dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    note_branch(x0)
    note_branch(y0)

    flat_u = u.data.reshape(n, c, h * w)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0)
        wx = fx if dx else 1 - fx
        wy = fy if dy else 1 - fy
        corners.append((idx, valid, wx, wy, dx, dy))

    out = np.zeros((n, c, ho, wo), dtype=dtype)
    values = []
    for idx, valid, wx, wy, _, _ in corners:
        # [N, C, ho, wo]
        v = np.take_along_axis(flat_u, idx.reshape(n, 1, -1), axis=2).reshape(n, c, ho, wo)
        v = v * valid[:, None]
        values.append(v)
        out += v * (wx * wy)[:, None]

    def vjp(g):
        du = None
        if u.requires_grad:
            du = np.zeros(n * c * h * w, dtype=np.float64)
            plane = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            for idx, valid, wx, wy, _, _ in corners:
                contrib = g * (wx * wy * valid)[:, None]
                keys = (idx.reshape(n, 1, -1) + plane).reshape(-1)
                du += np.bincount(keys, weights=contrib.reshape(-1), minlength=du.size)
            du = du.reshape(n, c, h, w).astype(dtype)
        dgrid = None
        if grid.requires_grad:
            gx = np.zeros((n, ho, wo), dtype=dtype)
            gy = np.zeros((n, ho, wo), dtype=dtype)
            for (idx, valid, wx, wy, dx, dy), v in zip(corners, values):
                s = (g * v).sum(axis=1)
                gx += s * wy * (1 if dx else -1)
                gy += s * wx * (1 if dy else -1)
            dgrid = np.stack([gx * hx, gy * hy], axis=-1).astype(grid.data.dtype)
        return du, dgrid

    return _op(out, (u, grid), vjp, "bilinear_sample")


def init_localisation(in_channels: int, rng: np.random.Generator, prefix: str = "stn") -> list[Parameter]:
    """Parameters of the localisation net.

    conv(C->16, 5x5, s2, p2) -> relu -> conv(16->32, 5x5, s2, p2) -> relu ->
    global average pool -> fc(32->64) -> relu -> fc(64->6).  The last layer
    starts at zero weight and identity bias.
    """
    def he(shape, fan_in):
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))

    return [
        Parameter(f"{prefix}.conv1.weight", he((16, in_channels, 5, 5), in_channels * 25), "stn"),
        Parameter(f"{prefix}.conv1.bias", Tensor(np.zeros(16)), "stn"),
        Parameter(f"{prefix}.conv2.weight", he((32, 16, 5, 5), 16 * 25), "stn"),
        Parameter(f"{prefix}.conv2.bias", Tensor(np.zeros(32)), "stn"),
        Parameter(f"{prefix}.fc1.weight", he((64, 32), 32), "stn"),
        Parameter(f"{prefix}.fc1.bias", Tensor(np.zeros(64)), "stn"),
        Parameter(f"{prefix}.fc2.weight", Tensor(np.zeros((6, 64))), "stn"),
        Parameter(f"{prefix}.fc2.bias", Tensor(IDENTITY_THETA.copy()), "stn"),
    ]


def localize(u: Tensor, params: dict[str, Parameter], prefix: str = "stn") -> Tensor:
    """Regress [N, 6] affine parameters from feature maps."""
    w1 = params[f"{prefix}.conv1.weight"].value
    if u.ndim != 4 or u.shape[1] != w1.shape[1]:
        raise ValueError(f"localisation net expects {w1.shape[1]} input channels, got {u.shape}")
    x = relu(conv2d(u, w1, params[f"{prefix}.conv1.bias"].value, stride=2, pad=2))
    x = relu(conv2d(x, params[f"{prefix}.conv2.weight"].value, params[f"{prefix}.conv2.bias"].value,
                    stride=2, pad=2))
    x = global_avg_pool(x)
    x = relu(linear(x, params[f"{prefix}.fc1.weight"].value, params[f"{prefix}.fc1.bias"].value))
    return linear(x, params[f"{prefix}.fc2.weight"].value, params[f"{prefix}.fc2.bias"].value)


def stn_forward(u: Tensor, params: dict[str, Parameter], prefix: str = "stn") -> tuple[Tensor, Tensor]:
    """Align ``u`` with its own regressed transform; returns (aligned maps, theta)."""
    theta = localize(u, params, prefix)
    grid = generate_grid(theta, u.shape[2], u.shape[3])
    return bilinear_sample(u, grid), theta


def warp(u: Tensor, theta: Tensor) -> Tensor:
    """Resample ``u`` on the grid of ``theta`` at its own extents."""
    return bilinear_sample(u, generate_grid(theta, u.shape[2], u.shape[3]))
