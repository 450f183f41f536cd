"""Fixed 8-channel coordinate maps appended to the visual features."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

CHANNELS = 8


@lru_cache(maxsize=32)
def spatial_map(grid_w: int, grid_h: int) -> np.ndarray:
    """Coordinate map of shape (grid_h, grid_w, 8).

    With the grid placed so its top-left corner is (0, 0) and bottom-right is
    (1, 1), cell (i, j) carries

        (i/W', j/H', (i+0.5)/W', (j+0.5)/H', (i+1)/W', (j+1)/H', 1/W', 1/H')

    i.e. the cell's top-left corner, center, and bottom-right corner, plus the
    inverse grid sizes. Values are constants in [0, 1]; the array is cached
    per grid size and must not be written to.
    """
    if grid_w < 1 or grid_h < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid_w}x{grid_h}")
    i = np.arange(grid_w, dtype=np.float64)
    j = np.arange(grid_h, dtype=np.float64)
    ii, jj = np.meshgrid(i, j)  # both (grid_h, grid_w)
    out = np.empty((grid_h, grid_w, CHANNELS), dtype=np.float64)
    out[..., 0] = ii / grid_w
    out[..., 1] = jj / grid_h
    out[..., 2] = (ii + 0.5) / grid_w
    out[..., 3] = (jj + 0.5) / grid_h
    out[..., 4] = (ii + 1.0) / grid_w
    out[..., 5] = (jj + 1.0) / grid_h
    out[..., 6] = 1.0 / grid_w
    out[..., 7] = 1.0 / grid_h
    out.setflags(write=False)
    return out
