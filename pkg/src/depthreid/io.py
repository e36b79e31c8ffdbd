"""File formats: PLY clouds, 16-bit PGM depth maps, skeleton/descriptor JSON, CSV matrices.

Every writer goes through a temporary file in the destination directory and
an ``os.replace``, so readers never see a half-written file.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from .errors import DataFileError, DimensionMismatchError
from .geometry import DepthImage, Intrinsics, PointCloud, SkeletonJoints
from .transfer import AuxiliaryDataset


@contextlib.contextmanager
def atomic_open(path, mode: str = "w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({"newline": ""} if "b" not in mode else {})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    with atomic_open(path) as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataFileError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataFileError(f"{path} is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# point clouds, depth images, skeletons


def write_ply(path, cloud: PointCloud) -> None:
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.has_normals else [])
    cols = [cloud.points] + ([cloud.normals] if cloud.has_normals else [])
    data = np.hstack(cols)
    vertex = np.empty(len(data), dtype=[(n, "f8") for n in names])
    for i, n in enumerate(names):
        vertex[n] = data[:, i]
    ply = PlyData([PlyElement.describe(vertex, "vertex")], text=True)
    with atomic_open(path, "wb") as fh:
        ply.write(fh)


def read_ply(path) -> PointCloud:
    """Load the ``vertex`` element; normals are kept when ``nx, ny, nz`` are present."""
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
        points = np.column_stack([v["x"], v["y"], v["z"]]).astype(float)
        normals = None
        if all(n in v.dtype.names for n in ("nx", "ny", "nz")):
            normals = np.column_stack([v["nx"], v["ny"], v["nz"]]).astype(float)
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    except OSError as exc:
        raise DataFileError(f"cannot read {path}: {exc}") from None
    except Exception as exc:  # plyfile raises a mix of parse errors
        raise DataFileError(f"{path} is not a valid PLY point cloud: {exc}") from None
    return PointCloud(points, normals)


def _sidecar(pgm_path) -> Path:
    return Path(pgm_path).with_suffix(".json")


def write_depth_image(path, img: DepthImage, intrinsics_path=None) -> None:
    depth = np.rint(img.depth.reshape(img.height, img.width))
    if depth.min() < 0 or depth.max() > 65535:
        raise DataFileError("depth values must lie in [0, 65535] mm")
    buf = io.BytesIO()
    Image.fromarray(depth.astype(np.uint16)).save(buf, format="PPM")
    with atomic_open(path, "wb") as fh:
        fh.write(buf.getvalue())
    k = img.intrinsics
    write_json(intrinsics_path or _sidecar(path), {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy})


def read_depth_image(path, intrinsics_path=None) -> DepthImage:
    """16-bit P5 PGM (mm, 0 = invalid) plus its ``{fx, fy, cx, cy}`` sidecar JSON."""
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode not in ("I", "I;16", "I;16B"):
                raise DataFileError(f"{path} is not a 16-bit PGM (format {im.format}, mode {im.mode})")
            depth = np.asarray(im, dtype=float)
    except OSError as exc:
        raise DataFileError(f"cannot read {path}: {exc}") from None
    k = read_json(intrinsics_path or _sidecar(path))
    try:
        intr = Intrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFileError(f"intrinsics for {path} are incomplete: {exc}") from None
    h, w = depth.shape
    return DepthImage(w, h, depth, intr)


def write_skeleton(path, joints: SkeletonJoints) -> None:
    write_json(path, {k: [float(c) for c in v] for k, v in joints.to_dict().items()})


def read_skeleton(path) -> SkeletonJoints:
    data = read_json(path)
    if not isinstance(data, dict):
        raise DataFileError(f"{path}: skeleton must be a JSON object of joint -> [x, y, z]")
    return SkeletonJoints.from_mapping(data)


# ---------------------------------------------------------------------------
# CSV


def write_matrix_csv(path, X, header=None) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    header = header or [f"f{i}" for i in range(X.shape[1])]
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[repr(float(v)) for v in row] for row in X])


def _read_rows(path) -> list:
    try:
        with open(path, newline="") as fh:
            return [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise DataFileError(f"cannot read {path}: {exc.strerror}") from None


def read_matrix_csv(path):
    """``(header, matrix)`` from a CSV whose first row names the columns."""
    rows = _read_rows(path)
    if not rows:
        raise DataFileError(f"{path} is empty")
    try:
        X = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DataFileError(f"{path}: non-numeric cell ({exc})") from None
    if X.ndim != 2 or (len(X) and X.shape[1] != len(rows[0])):
        raise DataFileError(f"{path}: ragged rows or header/column count mismatch")
    return rows[0], X


def read_labels_csv(path) -> np.ndarray:
    rows = _read_rows(path)
    if len(rows) < 2:
        raise DataFileError(f"{path}: expected a header row and at least one label")
    return np.array([r[0] for r in rows[1:]])


def write_labels_csv(path, labels, name: str = "label") -> None:
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([name])
        w.writerows([[str(v)] for v in labels])


def write_distance_csv(path, dist, probe_ids, gallery_ids) -> None:
    """Write a probe x gallery matrix with probe ids across the top and gallery ids down the side."""
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (len(probe_ids), len(gallery_ids)):
        raise DimensionMismatchError(f"distance matrix {dist.shape} vs {len(probe_ids)} probes x {len(gallery_ids)} gallery")
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + [str(p) for p in probe_ids])
        for j, g in enumerate(gallery_ids):
            w.writerow([str(g)] + [repr(float(v)) for v in dist[:, j]])


def read_distance_csv(path):
    """``(probe_ids, gallery_ids, dist)`` with ``dist`` shaped probe x gallery."""
    rows = _read_rows(path)
    if len(rows) < 2 or len(rows[0]) < 2:
        raise DataFileError(f"{path}: distance matrix needs a header row and at least one gallery row")
    probe_ids = rows[0][1:]
    gallery_ids = [r[0] for r in rows[1:]]
    try:
        M = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DataFileError(f"{path}: non-numeric cell ({exc})") from None
    if M.ndim != 2 or M.shape[1] != len(probe_ids):
        raise DataFileError(f"{path}: rows do not match the {len(probe_ids)} probe columns")
    return probe_ids, gallery_ids, M.T


def write_cmc_csv(path, curve) -> None:
    with atomic_open(path) as fh:
        fh.write("rank,accuracy\n")
        for r, a in enumerate(np.asarray(curve, dtype=float), start=1):
            fh.write(f"{r},{a:.6f}\n")


def read_cmc_csv(path) -> np.ndarray:
    rows = _read_rows(path)
    return np.array([float(r[1]) for r in rows[1:]])


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    person: str
    group: str
    index: int
    cloud: Path
    skeleton: Optional[Path]
    depth: Optional[Path] = None


def _resolve(base: Path, p) -> Optional[Path]:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


def read_dataset_manifest(path) -> list:
    """Flatten ``{"persons": [{"id", "sequences": {group: [frame, ...]}}]}``.

    A frame names a ``cloud`` PLY (or a ``depth`` PGM) and a ``skeleton`` JSON;
    relative paths resolve against the manifest's directory.
    """
    data = read_json(path)
    base = Path(path).resolve().parent
    try:
        entries = []
        for person in data["persons"]:
            pid = str(person["id"])
            for group, frames in person["sequences"].items():
                for i, fr in enumerate(frames):
                    if "cloud" not in fr and "depth" not in fr:
                        raise KeyError(f"frame {i} of person {pid} has neither 'cloud' nor 'depth'")
                    entries.append(
                        ManifestEntry(pid, str(group), i, _resolve(base, fr.get("cloud")),
                                      _resolve(base, fr.get("skeleton")), _resolve(base, fr.get("depth")))
                    )
    except (KeyError, TypeError, AttributeError) as exc:
        raise DataFileError(f"{path}: malformed dataset manifest ({exc})") from None
    return entries


def write_dataset_manifest(path, persons: dict) -> None:
    """``persons`` maps id -> {group: [frame dict, ...]}."""
    write_json(path, {"persons": [{"id": pid, "sequences": seqs} for pid, seqs in persons.items()]})


def read_aux_manifest(path) -> AuxiliaryDataset:
    """``{"visual": csv, "depth": csv, "labels": csv, "metadata": {...}}``; rows pair up in file order."""
    data = read_json(path)
    base = Path(path).resolve().parent
    try:
        _, V = read_matrix_csv(_resolve(base, data["visual"]))
        _, D = read_matrix_csv(_resolve(base, data["depth"]))
        labels = read_labels_csv(_resolve(base, data["labels"]))
    except (KeyError, TypeError) as exc:
        raise DataFileError(f"{path}: malformed auxiliary manifest ({exc})") from None
    return AuxiliaryDataset(V, D, labels)


def write_aux_manifest(path, aux: AuxiliaryDataset, metadata: Optional[dict] = None) -> None:
    path = Path(path)
    stem = path.stem
    write_matrix_csv(path.parent / f"{stem}_visual.csv", aux.visual)
    write_matrix_csv(path.parent / f"{stem}_depth.csv", aux.depth)
    write_labels_csv(path.parent / f"{stem}_labels.csv", aux.labels)
    write_json(path, {
        "visual": f"{stem}_visual.csv",
        "depth": f"{stem}_depth.csv",
        "labels": f"{stem}_labels.csv",
        "metadata": metadata or {},
    })
