"""Positional encodings: sinusoidal frequencies, multi-level hashed voxel
grids, tri-planar grids, and the coarse-to-fine level mask.

Each encoder has a batched forward that records a cache, and a backward
that scatters gradients into the parameter tables and (optionally) returns
gradients with respect to the input positions. Gradients accumulate in
float64 regardless of the table dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfDomain

DOMAIN_EPS = 1e-6
HASH_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))

# The 8 cell corners in (x, y, z) bit order.
_CORNERS = np.array([[b0, b1, b2]
                     for b0 in (0, 1) for b1 in (0, 1) for b2 in (0, 1)],
                    dtype=np.int64)


@dataclass
class EncodingConfig:
    levels: int = 4
    base_resolution: int = 16
    growth: float = 1.5
    features_per_level: int = 2
    hash_table_size: int = 2 ** 15
    planar_resolution: int = 64
    planar_channels: int = 4
    sinusoidal_levels: int = 4

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.growth <= 1.0:
            raise ValueError("growth must be > 1")
        if self.hash_table_size & (self.hash_table_size - 1):
            raise ValueError("hash_table_size must be a power of two")

    def level_resolutions(self) -> list[int]:
        return [int(np.floor(self.base_resolution * self.growth ** l))
                for l in range(self.levels)]

    def mask_order(self) -> list[tuple[str, int]]:
        """Level activation order for the coarse-to-fine mask.

        Hash levels and the planar block are interleaved by ascending
        spatial resolution; entries are ("hash", level) or ("planar", 0).
        """
        entries = [("hash", l, r) for l, r in enumerate(self.level_resolutions())]
        entries.append(("planar", 0, self.planar_resolution))
        entries.sort(key=lambda e: (e[2], e[0]))
        return [(kind, idx) for kind, idx, _ in entries]

    @property
    def total_mask_levels(self) -> int:
        return self.levels + 1

    @property
    def feature_dim(self) -> int:
        return self.planar_channels + self.levels * self.features_per_level


def check_domain(x: np.ndarray) -> np.ndarray:
    """Clamp coordinates to [0, 1]; positions beyond the tolerance raise.

    Preserves floating dtype so a float32 pipeline stays float32.
    """
    x = np.atleast_2d(np.asarray(x))
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    if x.size and (x.min() < -DOMAIN_EPS or x.max() > 1.0 + DOMAIN_EPS):
        raise OutOfDomain(
            f"coordinates outside the unit cube: range [{x.min()}, {x.max()}]")
    return np.clip(x, 0.0, 1.0)


def sinusoidal_encode(x: np.ndarray, levels: int) -> np.ndarray:
    """Concatenated (sin, cos) pairs at frequencies 2^(l-1) * pi, l = 1..L.

    A single point maps to a 6L vector; a batch (n, 3) maps to (n, 6L).
    """
    single = np.asarray(x).ndim == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    blocks = []
    for level in range(1, levels + 1):
        arg = (2.0 ** (level - 1)) * np.pi * x
        blocks.append(np.sin(arg))
        blocks.append(np.cos(arg))
    out = np.concatenate(blocks, axis=1)
    return out[0] if single else out


def masked_sinusoidal_encode(x: np.ndarray, levels: int, alpha: float) -> np.ndarray:
    """Sinusoidal encoding with each frequency block scaled by its c2f weight."""
    out = sinusoidal_encode(x, levels)
    flat = out.ndim == 1
    out = np.atleast_2d(out).copy()
    for level in range(levels):
        w = c2f_weight(alpha, level)
        if w != 1.0:
            out[:, 6 * level:6 * (level + 1)] *= w
    return out[0] if flat else out


def c2f_weight(alpha: float, level: int) -> float:
    """Cosine ramp activating level `level` while alpha sweeps [0, L_total]."""
    a = alpha - level
    if a < 0.0:
        return 0.0
    if a < 1.0:
        return float((1.0 - np.cos(a * np.pi)) / 2.0)
    return 1.0


def hash_corner_indices(cells: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash (i*p1 xor j*p2 xor k*p3) mod table_size, elementwise."""
    cells = cells.astype(np.uint64)
    h = (cells[..., 0] * HASH_PRIMES[0]
         ^ cells[..., 1] * HASH_PRIMES[1]
         ^ cells[..., 2] * HASH_PRIMES[2])
    return (h % np.uint64(table_size)).astype(np.int64)


def _trilinear_setup(x: np.ndarray, resolution: int):
    """Cell indices, corner hash inputs, weights and weight gradients.

    Positions scale by the cell count `resolution`; the corner lattice has
    resolution + 1 sites per axis. Works in the dtype of `x`.
    """
    pos = x * np.asarray(resolution, dtype=x.dtype)
    floor = np.floor(pos)
    base = floor.astype(np.int64)                  # (n, 3), in [0, resolution]
    frac = pos - floor                             # (n, 3), in [0, 1)
    corners = base[:, None, :] + _CORNERS[None, :, :]          # (n, 8, 3)

    n = x.shape[0]
    one = 1.0 - frac
    w_ax = (np.stack([one[:, 0], frac[:, 0]]),     # (2, n) per axis
            np.stack([one[:, 1], frac[:, 1]]),
            np.stack([one[:, 2], frac[:, 2]]))
    weights = np.empty((n, 8), dtype=x.dtype)
    grads = np.empty((n, 8, 3), dtype=x.dtype)
    for k, (b0, b1, b2) in enumerate(_CORNERS):
        w01 = w_ax[0][b0] * w_ax[1][b1]
        weights[:, k] = w01 * w_ax[2][b2]
        s0, s1, s2 = 2 * b0 - 1, 2 * b1 - 1, 2 * b2 - 1
        grads[:, k, 0] = s0 * (w_ax[1][b1] * w_ax[2][b2])
        grads[:, k, 1] = s1 * (w_ax[0][b0] * w_ax[2][b2])
        grads[:, k, 2] = s2 * w01
    grads *= resolution
    return corners, weights, grads


def hash_encode_forward(x: np.ndarray, tables: np.ndarray, cfg: EncodingConfig):
    """Trilinear blend of 8 hashed corner features per level, concatenated.

    x: (n, 3) in [0, 1]; tables: (levels, table_size, F).
    Returns (features (n, levels*F), cache).
    """
    x = check_domain(x)
    n = x.shape[0]
    f = cfg.features_per_level
    features = np.empty((n, cfg.levels * f), dtype=x.dtype)
    cache = {"x_shape": n, "levels": []}
    for level, res in enumerate(cfg.level_resolutions()):
        corners, weights, wgrads = _trilinear_setup(x, res)
        idx = hash_corner_indices(corners, cfg.hash_table_size)   # (n, 8)
        vals = tables[level][idx]                                 # (n, 8, F)
        features[:, level * f:(level + 1) * f] = \
            (weights[:, None, :] @ vals)[:, 0, :]
        cache["levels"].append((idx, weights, wgrads, vals))
    return features, cache


def hash_encode_backward(cache, upstream: np.ndarray, grad_tables: np.ndarray,
                         cfg: EncodingConfig, need_dx: bool = True):
    """Scatter upstream feature gradients into the tables; return d/dx."""
    f = cfg.features_per_level
    n = cache["x_shape"]
    dx = np.zeros((n, 3), dtype=upstream.dtype) if need_dx else None
    table_size = grad_tables.shape[1]
    for level, (idx, weights, wgrads, vals) in enumerate(cache["levels"]):
        dy = upstream[:, level * f:(level + 1) * f]               # (n, F)
        contrib = weights[:, :, None] * dy[:, None, :]            # (n, 8, F)
        flat_idx = idx.reshape(-1)
        for ch in range(f):
            grad_tables[level, :, ch] += np.bincount(
                flat_idx, weights=contrib[:, :, ch].reshape(-1),
                minlength=table_size)
        if need_dx:
            val_dot = (vals @ dy[:, :, None])[:, :, 0]            # (n, 8)
            dx += (val_dot[:, None, :] @ wgrads)[:, 0, :]
    return dx


def hash_encode(x: np.ndarray, tables: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Single-point or batched hash-grid encoding (forward only)."""
    single = np.asarray(x).ndim == 1
    out, _ = hash_encode_forward(x, tables, cfg)
    return out[0] if single else out


_PLANE_AXES = ((0, 1), (0, 2), (1, 2))   # xy, xz, yz


def _bilinear_setup(uv: np.ndarray, size: int):
    """Align-corners bilinear setup on a size x size grid (size-1 cells)."""
    pos = uv * np.asarray(size - 1, dtype=uv.dtype)
    base_f = np.clip(np.floor(pos), 0.0, size - 2)
    base = base_f.astype(np.int64)
    frac = pos - base_f
    fu, fv = frac[:, 0], frac[:, 1]
    weights = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv),
                        (1 - fu) * fv, fu * fv], axis=1)           # (n, 4)
    du = np.stack([-(1 - fv), (1 - fv), -fv, fv], axis=1) * (size - 1)
    dv = np.stack([-(1 - fu), -fu, (1 - fu), fu], axis=1) * (size - 1)
    flat = np.stack([base[:, 0] * size + base[:, 1],
                     (base[:, 0] + 1) * size + base[:, 1],
                     base[:, 0] * size + base[:, 1] + 1,
                     (base[:, 0] + 1) * size + base[:, 1] + 1], axis=1)
    return flat, weights, du, dv


def planar_encode_forward(x: np.ndarray, planes: np.ndarray, cfg: EncodingConfig):
    """Channelwise product of bilinear samples from the xy, xz, yz planes.

    planes: (3, M, M, C). Returns (features (n, C), cache).
    """
    x = check_domain(x)
    m = cfg.planar_resolution
    samples = []
    cache_planes = []
    for p, (au, av) in enumerate(_PLANE_AXES):
        uv = x[:, (au, av)]
        flat, weights, du, dv = _bilinear_setup(uv, m)
        table = planes[p].reshape(m * m, -1)                       # (M*M, C)
        vals = table[flat]                                         # (n, 4, C)
        samples.append((weights[:, None, :] @ vals)[:, 0, :])
        cache_planes.append((flat, weights, du, dv, vals, au, av))
    features = samples[0] * samples[1] * samples[2]
    return features, {"samples": samples, "planes": cache_planes,
                      "n": x.shape[0]}


def planar_encode_backward(cache, upstream: np.ndarray, grad_planes: np.ndarray,
                           cfg: EncodingConfig, need_dx: bool = True):
    """Product rule across the three planes, then bilinear scatter."""
    m = cfg.planar_resolution
    s0, s1, s2 = cache["samples"]
    others = [s1 * s2, s0 * s2, s0 * s1]
    dx = np.zeros((cache["n"], 3), dtype=upstream.dtype) if need_dx else None
    for p, (flat, weights, du, dv, vals, au, av) in enumerate(cache["planes"]):
        dsample = upstream * others[p]                             # (n, C)
        contrib = weights[:, :, None] * dsample[:, None, :]        # (n, 4, C)
        flat_all = flat.reshape(-1)
        gp = grad_planes[p].reshape(m * m, -1)
        for ch in range(gp.shape[1]):
            gp[:, ch] += np.bincount(flat_all,
                                     weights=contrib[:, :, ch].reshape(-1),
                                     minlength=m * m)
        if need_dx:
            val_dot = (vals @ dsample[:, :, None])[:, :, 0]        # (n, 4)
            dx[:, au] += (val_dot * du).sum(axis=1)
            dx[:, av] += (val_dot * dv).sum(axis=1)
    return dx


def planar_encode(x: np.ndarray, planes: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Single-point or batched planar encoding (forward only)."""
    single = np.asarray(x).ndim == 1
    out, _ = planar_encode_forward(x, planes, cfg)
    return out[0] if single else out


def mask_weights(alpha: float, cfg: EncodingConfig):
    """C2f weights for (hash levels, planar block) under the resolution order."""
    w_hash = np.ones(cfg.levels)
    w_planar = 1.0
    for slot, (kind, idx) in enumerate(cfg.mask_order()):
        w = c2f_weight(alpha, slot)
        if kind == "hash":
            w_hash[idx] = w
        else:
            w_planar = w
    return w_hash, w_planar


def encode_forward(x: np.ndarray, planes: np.ndarray, tables: np.ndarray,
                   cfg: EncodingConfig, alpha: float | None = None):
    """Hybrid encoding: planar block then hash levels, c2f-masked.

    alpha = None (or >= total levels) leaves every block untouched, so the
    masked output is bit-identical to the unmasked one.
    Returns (features (n, planar_channels + levels*F), cache).
    """
    planar_feat, planar_cache = planar_encode_forward(x, planes, cfg)
    hash_feat, hash_cache = hash_encode_forward(x, tables, cfg)
    if alpha is None:
        w_hash, w_planar = np.ones(cfg.levels), 1.0
    else:
        w_hash, w_planar = mask_weights(alpha, cfg)
    if w_planar != 1.0:
        planar_feat *= w_planar
    f = cfg.features_per_level
    for level in range(cfg.levels):
        if w_hash[level] != 1.0:
            hash_feat[:, level * f:(level + 1) * f] *= w_hash[level]
    features = np.concatenate([planar_feat, hash_feat], axis=1)
    cache = {"planar": planar_cache, "hash": hash_cache,
             "w_hash": w_hash, "w_planar": w_planar}
    return features, cache


def encode_backward(cache, upstream: np.ndarray, grad_planes: np.ndarray,
                    grad_tables: np.ndarray, cfg: EncodingConfig,
                    need_dx: bool = True):
    """Backward of `encode_forward`; returns d/dx or None."""
    c = cfg.planar_channels
    up_planar = upstream[:, :c] * float(cache["w_planar"])
    up_hash = upstream[:, c:].copy()
    f = cfg.features_per_level
    for level in range(cfg.levels):
        up_hash[:, level * f:(level + 1) * f] *= cache["w_hash"][level]
    dx_p = planar_encode_backward(cache["planar"], up_planar, grad_planes,
                                  cfg, need_dx)
    dx_h = hash_encode_backward(cache["hash"], up_hash, grad_tables,
                                cfg, need_dx)
    if not need_dx:
        return None
    return dx_p + dx_h


def masked_encoding(x: np.ndarray, planes: np.ndarray, tables: np.ndarray,
                    cfg: EncodingConfig, alpha: float) -> np.ndarray:
    """Hybrid planar+hash encoding with the c2f mask applied (forward only)."""
    single = np.asarray(x).ndim == 1
    out, _ = encode_forward(x, planes, tables, cfg, alpha)
    return out[0] if single else out
