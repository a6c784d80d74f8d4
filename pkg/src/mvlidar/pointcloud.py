"""Point-cloud and label file IO plus class-taxonomy remapping.

File formats
------------
* scan ``.bin``: packed little-endian float32 quadruples (x, y, z,
  intensity), 16 bytes per point.
* ``.label``: packed little-endian uint32 per point; the low 16 bits are
  the class id, the high 16 bits an instance id (discarded on load).
* class-map config: text lines ``raw_id = class_name`` mapping raw label
  ids onto the 7-class segmentation taxonomy.

Coordinates are ego-frame meters (+x forward); intensity is expected in
[0, 1] and clamped (with a counter) otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, MalformedFile, NonFiniteValue

log = logging.getLogger(__name__)

POINT_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4

# Taxonomies
TAXONOMY_RAW = "raw-semantickitti"
TAXONOMY_SEG7 = "seg7"
TAXONOMY_DET3 = "det3"

# 7-class segmentation taxonomy
SEG7_NAMES = ("car", "truck", "pedestrian", "cyclist", "road", "sidewalk",
              "unknown")
SEG_CAR, SEG_TRUCK, SEG_PEDESTRIAN, SEG_CYCLIST, SEG_ROAD, SEG_SIDEWALK, \
    SEG_UNKNOWN = range(7)

# 3-class detection taxonomy
DET3_NAMES = ("vehicle", "pedestrian", "unknown")
DET_VEHICLE, DET_PEDESTRIAN, DET_UNKNOWN = range(3)

_TAXONOMY_SIZE = {TAXONOMY_SEG7: 7, TAXONOMY_DET3: 3,
                  TAXONOMY_RAW: 1 << 16}

# Default raw -> seg7 table. The raw taxonomy has many more classes than
# the 7 used here; everything absent from this table maps to unknown.
DEFAULT_CLASS_MAP: dict[int, int] = {
    10: SEG_CAR,
    13: SEG_TRUCK,
    18: SEG_TRUCK,
    30: SEG_PEDESTRIAN,
    11: SEG_CYCLIST,
    15: SEG_CYCLIST,
    31: SEG_CYCLIST,
    32: SEG_CYCLIST,
    40: SEG_ROAD,
    44: SEG_ROAD,
    48: SEG_SIDEWALK,
}


@dataclass(frozen=True)
class PointCloud:
    """Immutable N x (x, y, z, intensity) sample set, ego frame, meters."""

    data: np.ndarray  # (N, 4) float32, read-only
    clamped: int = 0  # points whose intensity was clamped into [0, 1]

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def x(self) -> np.ndarray:
        return self.data[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.data[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.data[:, 2]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]

    @classmethod
    def from_array(cls, arr, clamp_intensity: bool = True) -> "PointCloud":
        """Build from an (N, 4) array; validates finiteness, clamps intensity."""
        data = np.array(arr, dtype=np.float32, copy=True).reshape(-1, 4)
        if not np.all(np.isfinite(data)):
            raise NonFiniteValue("point cloud contains NaN or Inf values")
        clamped = 0
        if clamp_intensity and len(data):
            outside = (data[:, 3] < 0.0) | (data[:, 3] > 1.0)
            clamped = int(outside.sum())
            if clamped:
                log.warning("clamped intensity of %d points into [0, 1]", clamped)
                data[:, 3] = np.clip(data[:, 3], 0.0, 1.0)
        data.setflags(write=False)
        return cls(data=data, clamped=clamped)


@dataclass(frozen=True)
class PointLabels:
    """Per-point class ids under a declared taxonomy."""

    ids: np.ndarray  # (N,) int32, read-only
    taxonomy: str

    def __post_init__(self):
        if self.taxonomy not in _TAXONOMY_SIZE:
            raise ValueError(f"unknown taxonomy {self.taxonomy!r}")
        n = _TAXONOMY_SIZE[self.taxonomy]
        if len(self.ids) and (self.ids.min() < 0 or self.ids.max() >= n):
            raise ValueError(
                f"label id out of range for taxonomy {self.taxonomy!r}")

    def __len__(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def from_array(cls, ids, taxonomy: str) -> "PointLabels":
        arr = np.array(ids, dtype=np.int32, copy=True).reshape(-1)
        arr.setflags(write=False)
        return cls(ids=arr, taxonomy=taxonomy)


def load_kitti_bin(path) -> PointCloud:
    """Parse a packed float32 (x, y, z, intensity) scan file."""
    raw = Path(path).read_bytes()
    if len(raw) % POINT_RECORD_BYTES != 0:
        raise MalformedFile(
            f"{path}: byte length {len(raw)} not divisible by {POINT_RECORD_BYTES}")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud.from_array(pts)


def save_kitti_bin(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(
        np.ascontiguousarray(cloud.data, dtype="<f4").tobytes())


def load_semantickitti_labels(path, expected_count: int) -> PointLabels:
    """Parse a packed uint32 label file; instance bits (high 16) are dropped."""
    raw = Path(path).read_bytes()
    if len(raw) != LABEL_RECORD_BYTES * expected_count:
        raise MalformedFile(
            f"{path}: expected {LABEL_RECORD_BYTES * expected_count} bytes "
            f"for {expected_count} labels, got {len(raw)}")
    ids = (np.frombuffer(raw, dtype="<u4") & 0xFFFF).astype(np.int32)
    return PointLabels.from_array(ids, TAXONOMY_RAW)


def save_labels(labels: PointLabels, path) -> None:
    """Write labels in the packed uint32 format (instance bits zero)."""
    Path(path).write_bytes(
        labels.ids.astype("<u4").tobytes())


def remap_labels(raw: PointLabels, table: dict[int, int] | None = None) -> PointLabels:
    """Map raw-taxonomy labels onto seg7; ids absent from the table become unknown.

    Total by construction: any input id yields a valid seg7 id.
    """
    if raw.taxonomy != TAXONOMY_RAW:
        raise ValueError(f"remap_labels expects raw labels, got {raw.taxonomy!r}")
    if table is None:
        table = DEFAULT_CLASS_MAP
    lut = np.full(1 << 16, SEG_UNKNOWN, dtype=np.int32)
    for raw_id, seg_id in table.items():
        lut[raw_id] = seg_id
    return PointLabels.from_array(lut[raw.ids], TAXONOMY_SEG7)


def check_paired(cloud: PointCloud, labels: PointLabels) -> None:
    if len(cloud) != len(labels):
        raise LengthMismatch(
            f"cloud has {len(cloud)} points but labels has {len(labels)}")


def load_class_map(path) -> dict[int, int]:
    """Parse a ``raw_id = class_name`` text config into a remap table."""
    table: dict[int, int] = {}
    name_to_id = {n: i for i, n in enumerate(SEG7_NAMES)}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise MalformedFile(f"{path}:{lineno}: expected 'raw_id = name'")
        key, _, value = stripped.partition("=")
        try:
            raw_id = int(key.strip())
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: bad raw id {key.strip()!r}") from exc
        cls_name = value.strip()
        if cls_name not in name_to_id:
            raise MalformedFile(
                f"{path}:{lineno}: unknown class {cls_name!r}; "
                f"expected one of {', '.join(SEG7_NAMES)}")
        table[raw_id] = name_to_id[cls_name]
    return table
