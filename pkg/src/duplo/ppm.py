"""Binary PPM (P6) emission for confusion heatmaps and class maps.

PPM keeps outputs bit-exact and dependency-free; the class palette below is
fixed and documented in the README.
"""

from __future__ import annotations

import numpy as np

# Index 0 = unlabeled (black); classes 1..13 follow.
CLASS_PALETTE = [
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (170, 110, 40),
    (128, 128, 0),
]


def write_ppm(path: str, pixels: np.ndarray) -> None:
    """pixels: (H, W, 3) uint8."""
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def heatmap_pixels(matrix: np.ndarray, cell: int = 16) -> np.ndarray:
    """Linear blue -> red ramp over matrix values, upscaled by `cell`."""
    m = np.asarray(matrix, dtype=np.float64)
    peak = m.max()
    norm = m / peak if peak > 0 else np.zeros_like(m)
    r = np.rint(255 * norm).astype(np.uint8)
    b = np.rint(255 * (1.0 - norm)).astype(np.uint8)
    g = np.zeros_like(r)
    img = np.stack([r, g, b], axis=-1)
    return np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)


def write_heatmap(path: str, matrix: np.ndarray, cell: int = 16) -> None:
    write_ppm(path, heatmap_pixels(matrix, cell))


def classmap_pixels(class_map: np.ndarray) -> np.ndarray:
    cm = np.asarray(class_map, dtype=np.int64)
    img = np.zeros(cm.shape + (3,), dtype=np.uint8)
    for idx, color in enumerate(CLASS_PALETTE):
        img[cm == idx] = color
    img[cm >= len(CLASS_PALETTE)] = (255, 255, 255)
    return img


def write_classmap(path: str, class_map: np.ndarray) -> None:
    write_ppm(path, classmap_pixels(class_map))
