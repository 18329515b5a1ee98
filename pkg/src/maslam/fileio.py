"""On-disk formats: ASCII PLY clouds, TUM trajectories, PPM color, PFM float
images, and flat key-value config files.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud, SE3Pose


class MalformedHeader(ValueError):
    pass


class TruncatedPayload(ValueError):
    pass


# ---------------------------------------------------------------------------
# PLY (debug output for point clouds)
# ---------------------------------------------------------------------------


def write_ply(path: str | Path, cloud: PointCloud) -> None:
    """ASCII PLY with x y z, intensity, and nx ny nz when normals exist."""
    has_normals = cloud.normals is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property float intensity",
    ]
    if has_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines.append("end_header")
    rows = []
    for i in range(len(cloud)):
        vals = [*cloud.points[i], cloud.intensities[i]]
        if has_normals:
            vals += list(cloud.normals[i])
        rows.append(" ".join(f"{v:.9g}" for v in vals))
    Path(path).write_text("\n".join(lines + rows) + "\n")


def read_ply(path: str | Path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise MalformedHeader("not a PLY file")
    n = None
    props = []
    i = 1
    while i < len(text):
        line = text[i].strip()
        i += 1
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            props.append(line.split()[-1])
        elif line == "end_header":
            break
    else:
        raise MalformedHeader("missing end_header")
    if n is None:
        raise MalformedHeader("missing vertex element")
    body = text[i:i + n]
    if len(body) < n:
        raise TruncatedPayload("fewer vertex rows than declared")
    data = np.array([[float(v) for v in row.split()] for row in body])
    if data.shape[1] != len(props):
        raise MalformedHeader("property count mismatch")
    cols = {p: data[:, j] for j, p in enumerate(props)}
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    intensities = cols.get("intensity", np.zeros(n))
    normals = None
    if "nx" in cols:
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return PointCloud(points, intensities, normals)


# ---------------------------------------------------------------------------
# TUM trajectories: "timestamp tx ty tz qx qy qz qw", 9 significant digits
# ---------------------------------------------------------------------------


def write_tum(path: str | Path, poses: list[SE3Pose], timestamps=None) -> None:
    if timestamps is None:
        timestamps = [float(i) for i in range(len(poses))]
    lines = []
    for ts, p in zip(timestamps, poses):
        w, x, y, z = p.q
        tx, ty, tz = p.t
        lines.append(" ".join(f"{v:.9g}" for v in (ts, tx, ty, tz, x, y, z, w)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path: str | Path) -> tuple[list[float], list[SE3Pose]]:
    timestamps, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            raise MalformedHeader(f"TUM line needs 8 fields, got {len(vals)}")
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        timestamps.append(ts)
        poses.append(SE3Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return timestamps, poses


# ---------------------------------------------------------------------------
# PPM (P6, 8-bit) color images
# ---------------------------------------------------------------------------


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """H x W x 3 float image in [0, 1], quantized once to 8 bits."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape[:2]
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def _read_token(f: io.BufferedReader) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise TruncatedPayload("unexpected end of header")
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise MalformedHeader("not a P6 PPM")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise MalformedHeader("only 8-bit PPM supported")
        payload = f.read(w * h * 3)
        if len(payload) < w * h * 3:
            raise TruncatedPayload("PPM pixel data truncated")
        data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
        return data.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# PFM (grayscale float32, little-endian, bottom-up rows per convention)
# ---------------------------------------------------------------------------


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("PFM writer handles single-channel images")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(img[::-1].tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"Pf":
            raise MalformedHeader("not a grayscale PFM")
        w = int(_read_token(f))
        h = int(_read_token(f))
        scale = float(_read_token(f))
        if scale >= 0:
            raise MalformedHeader("only little-endian (negative scale) PFM supported")
        payload = f.read(w * h * 4)
        if len(payload) < w * h * 4:
            raise TruncatedPayload("PFM pixel data truncated")
        data = np.frombuffer(payload, dtype="<f4").reshape(h, w)
        return np.ascontiguousarray(data[::-1]).astype(np.float32)


# ---------------------------------------------------------------------------
# Flat key-value config files: "key = value" lines, '#' comments
# ---------------------------------------------------------------------------


def write_config(path: str | Path, values: dict) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_config(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedHeader(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values
