"""Self-contained BEV renderings as portable pixmaps (no imaging deps).

Images are binary PPM (P6). The BEV-to-pixel convention puts +x (vehicle
forward) at the top of the image and +y to the left, matching the
top-down figures this output is meant for. Drivable cells render green;
each detection gets a stable per-instance color from a hashed hue.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .errors import MalformedFile
from .postprocess import OrientedBox
from .projection import BevConfig

DRIVABLE_COLOR = (0, 200, 0)
POINT_COLOR = (0, 170, 170)


def write_ppm(img: np.ndarray, path) -> None:
    """img: (H, W, 3) uint8."""
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise MalformedFile(f"{path}: not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise MalformedFile(f"{path}: unsupported maxval {maxval}")
    pos += 1
    data = np.frombuffer(raw[pos:pos + 3 * w * h], dtype=np.uint8)
    if data.size != 3 * w * h:
        raise MalformedFile(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).copy()


def world_to_pixel(x, y, cfg: BevConfig):
    """Ego meters -> (row, col) on a width_cells x length_cells image."""
    half = cfg.extent / 2.0
    ix = np.floor((np.asarray(x) + half) / cfg.cell_size).astype(np.int64)
    iy = np.floor((np.asarray(y) + half) / cfg.cell_size_y).astype(np.int64)
    return cfg.width_cells - 1 - ix, cfg.length_cells - 1 - iy


def instance_color(index: int) -> tuple[int, int, int]:
    """Stable, well-separated color per instance (hashed golden-ratio hue)."""
    hue = (index * 0.61803398875) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.95, 1.0)
    return int(r * 255), int(g * 255), int(b * 255)


def draw_line(img: np.ndarray, r0, c0, r1, c1, color) -> None:
    n = int(max(abs(r1 - r0), abs(c1 - c0))) + 1
    rr = np.rint(np.linspace(r0, r1, n)).astype(np.int64)
    cc = np.rint(np.linspace(c0, c1, n)).astype(np.int64)
    ok = (rr >= 0) & (rr < img.shape[0]) & (cc >= 0) & (cc < img.shape[1])
    img[rr[ok], cc[ok]] = color


def draw_box(img: np.ndarray, box: OrientedBox, cfg: BevConfig, color) -> None:
    corners = box.corners()
    rows, cols = world_to_pixel(corners[:, 0], corners[:, 1], cfg)
    for i in range(4):
        j = (i + 1) % 4
        draw_line(img, rows[i], cols[i], rows[j], cols[j], color)


def render_bev(detections, cfg: BevConfig | None = None,
               drivable: np.ndarray | None = None,
               occupancy: np.ndarray | None = None) -> np.ndarray:
    """Compose a BEV image: LiDAR occupancy, drivable space, then boxes.

    Vehicles come out as rectangles and pedestrians as squares simply
    because that is their decoded geometry; both draw the same way.
    """
    if cfg is None:
        cfg = BevConfig()
    img = np.zeros((cfg.width_cells, cfg.length_cells, 3), np.uint8)
    if occupancy is not None:
        rows, cols = np.nonzero(occupancy)
        img[cfg.width_cells - 1 - rows, cfg.length_cells - 1 - cols] = POINT_COLOR
    if drivable is not None:
        rows, cols = np.nonzero(drivable)
        img[cfg.width_cells - 1 - rows, cfg.length_cells - 1 - cols] = DRIVABLE_COLOR
    for i, det in enumerate(detections):
        draw_box(img, det, cfg, instance_color(i))
    return img


def render_mask(mask: np.ndarray, color=DRIVABLE_COLOR) -> np.ndarray:
    """Boolean BEV mask -> image (mask cells in `color`, rest black)."""
    img = np.zeros((*mask.shape, 3), np.uint8)
    rows, cols = np.nonzero(mask)
    img[mask.shape[0] - 1 - rows, mask.shape[1] - 1 - cols] = color
    return img
