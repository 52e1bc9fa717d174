import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repro",
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repro")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rotate_points(points: np.ndarray, angle_deg: float, center=(0.0, 0.0)) -> np.ndarray:
    """Reference rotation in the (x right, y down) frame used everywhere."""
    theta = np.radians(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    rel = np.asarray(points, dtype=np.float64) - center
    return np.column_stack([rel[:, 0] * c - rel[:, 1] * s,
                            rel[:, 0] * s + rel[:, 1] * c]) + center


def rectangle_mask(width: int, height: int, rect_w: float, rect_h: float,
                   angle_deg: float) -> np.ndarray:
    """Filled rectangle of rect_w x rect_h rotated by angle_deg, rasterized
    independently of the library (membership test in the rotated frame)."""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ys, xs = np.mgrid[0:height, 0:width]
    pts = np.column_stack([xs.ravel() - cx, ys.ravel() - cy]).astype(np.float64)
    back = rotate_points(pts, -angle_deg)
    inside = (np.abs(back[:, 0]) <= rect_w / 2.0) & (np.abs(back[:, 1]) <= rect_h / 2.0)
    return inside.reshape(height, width)
