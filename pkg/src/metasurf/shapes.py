"""Signed level-set profiles for standard inclusions (positive inside the elastic phase)."""
from __future__ import annotations

import numpy as np

# parallelogram fitted to the reference coefficients (0.567, 0.260, 6.20e-6, 1.88)
PAPER_PARALLELOGRAM = dict(width=0.24, height=0.5, shear=0.5)


def circle(y, radius=0.3, center=(0.5, 0.5)):
    y = np.asarray(y, float)
    return radius - np.hypot(y[:, 0] - center[0], y[:, 1] - center[1])


def parallelogram(y, width=0.24, height=0.5, shear=0.5, center=(0.5, 0.5)):
    """Horizontal edges of length ``width``; the top edge is shifted by
    ``shear`` relative to the bottom one."""
    y = np.asarray(y, float)
    x = y[:, 0] - center[0]
    z = y[:, 1] - center[1]
    d_vert = 0.5 * height - np.abs(z)
    cos = height / np.hypot(height, shear)
    d_side = (0.5 * width - np.abs(x - shear * z / height)) * cos
    return np.minimum(d_vert, d_side)


def stripes(y, n=1, angle_deg=45.0, fill=0.3):
    """Periodic inclined bands; ``fill`` is the elastic fraction along x."""
    y = np.asarray(y, float)
    t = np.tan(np.radians(90.0 - angle_deg)) if angle_deg != 90.0 else 0.0
    s = (y[:, 0] - t * (y[:, 1] - 0.5)) * n
    d = np.abs(s - np.floor(s) - 0.5)
    return (0.5 * fill - d) / n


def template_profile(y, kind: str, **kw):
    table = {"circle": circle, "parallelogram": parallelogram, "stripes": stripes}
    if kind not in table:
        raise ValueError(f"unknown shape {kind!r}")
    return table[kind](y, **kw)
