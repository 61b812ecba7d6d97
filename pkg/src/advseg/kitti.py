"""Binary scan I/O in SemanticKITTI on-disk conventions.

``.bin`` files hold little-endian float32 quadruples (x, y, z, intensity)
per point; ``.label`` files hold one little-endian uint32 per point whose
low 16 bits are the semantic id. Datasets are laid out as
``<root>/sequences/<NN>/velodyne/*.bin`` with sibling ``labels/*.label``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import LabeledCloud
from .errors import DataError, FormatError

POINT_RECORD_BYTES = 16  # 4 little-endian float32 per point
SEMANTIC_MASK = 0xFFFF


def load_kitti_scan(bin_path, label_path=None) -> LabeledCloud:
    """Read a scan; a missing/None label file yields an all-zero, unlabeled cloud.

    Raises :class:`FormatError` on malformed files (odd byte counts,
    point/label count mismatch) and :class:`DataError` on non-finite
    coordinates, naming the offending point.
    """
    bin_path = Path(bin_path)
    raw = bin_path.read_bytes()
    if len(raw) % POINT_RECORD_BYTES != 0:
        raise FormatError(
            f"{bin_path}: size {len(raw)} is not a multiple of {POINT_RECORD_BYTES} bytes")
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    n = records.shape[0]

    bad = np.flatnonzero(~np.isfinite(records[:, :3]).all(axis=1))
    if bad.size:
        raise DataError(f"{bin_path}: non-finite coordinate at point {bad[0]}")

    if label_path is None:
        labels = np.zeros(n, dtype=np.int64)
        unlabeled = True
    else:
        label_path = Path(label_path)
        lraw = label_path.read_bytes()
        if len(lraw) % 4 != 0:
            raise FormatError(f"{label_path}: size {len(lraw)} is not a multiple of 4 bytes")
        words = np.frombuffer(lraw, dtype="<u4")
        if words.shape[0] != n:
            raise FormatError(
                f"label/point count mismatch: {bin_path} has {n} points, "
                f"{label_path} has {words.shape[0]} labels")
        labels = (words & SEMANTIC_MASK).astype(np.int64)
        unlabeled = False

    return LabeledCloud(
        points=records[:, :3].astype(np.float64),
        labels=labels,
        intensity=records[:, 3].astype(np.float64),
        unlabeled=unlabeled,
    )


def save_kitti_scan(cloud: LabeledCloud, bin_path, label_path=None) -> None:
    """Write a scan so that loading it back reproduces coordinates and labels.

    Coordinates and intensity are stored as float32; an absent intensity
    field is written as 0.0. Labels are stored as uint32 semantic ids.
    """
    bin_path = Path(bin_path)
    n = len(cloud)
    records = np.zeros((n, 4), dtype="<f4")
    records[:, :3] = cloud.points.astype("<f4")
    if cloud.intensity is not None:
        records[:, 3] = cloud.intensity.astype("<f4")
    try:
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        bin_path.write_bytes(records.tobytes())
        if label_path is not None:
            label_path = Path(label_path)
            label_path.parent.mkdir(parents=True, exist_ok=True)
            words = (cloud.labels.astype(np.int64) & SEMANTIC_MASK).astype("<u4")
            label_path.write_bytes(words.tobytes())
    except OSError as exc:
        raise FormatError(f"failed writing scan to {bin_path}: {exc}") from exc


def scan_paths(root) -> list[tuple[str, Path, Optional[Path]]]:
    """Enumerate (scan_id, bin_path, label_path) under a dataset root.

    ``scan_id`` is ``<sequence>/<stem>``; label_path is None when the
    sibling ``labels`` file is missing. Sorted for determinism.
    """
    root = Path(root)
    out = []
    seq_dir = root / "sequences"
    if not seq_dir.is_dir():
        return out
    for seq in sorted(p for p in seq_dir.iterdir() if p.is_dir()):
        velo = seq / "velodyne"
        if not velo.is_dir():
            continue
        for bin_path in sorted(velo.glob("*.bin")):
            label_path = seq / "labels" / (bin_path.stem + ".label")
            out.append((f"{seq.name}/{bin_path.stem}",
                        bin_path,
                        label_path if label_path.exists() else None))
    return out


def scan_output_paths(root, scan_id: str) -> tuple[Path, Path]:
    """bin/label destination paths for a scan id under a dataset root."""
    seq, stem = scan_id.split("/", 1)
    root = Path(root)
    return (root / "sequences" / seq / "velodyne" / f"{stem}.bin",
            root / "sequences" / seq / "labels" / f"{stem}.label")


def save_dataset(root, clouds: dict[str, LabeledCloud]) -> None:
    """Write a {scan_id: cloud} mapping in the documented layout."""
    for scan_id, cloud in clouds.items():
        bin_path, label_path = scan_output_paths(root, scan_id)
        save_kitti_scan(cloud, bin_path, label_path)
