"""File formats used by the pipeline, documented bit-exactly.

Camera file (plain text):
    3 rows of K, then 3 rows of [R | T], row-major, whitespace-separated
    decimal with 17 significant digits.

Flow file (.flo):
    magic float32 202021.25, int32 width, int32 height, then height*width
    interleaved float32 (dx, dy) pairs, row-major, all little-endian.
    Invalid pixels are written as (1e10, 1e10); any |component| > 1e9 reads
    back as invalid.

Depth file (.pfm):
    one-channel PFM: "Pf\\n{width} {height}\\n-1.0\\n" followed by height*width
    float32 little-endian scanlines ordered bottom-to-top (PFM convention).
    Invalid pixels are written as 0; a sidecar "<name>.pfm.txt" carries
    d_min / d_max / num_planes as key=value lines.

Point cloud (.ply):
    binary little-endian PLY, properties float x, float y, float z and
    uchar support (support counts clamp at 255); optional ASCII variant for
    debugging.

Images: 8-bit or 16-bit grayscale/RGB in lossless raster formats via Pillow;
intensities map to [0, 1] by dividing by the type maximum.

Key=value files: one "key=value" pair per line, '#' comments allowed.
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .depth import DepthMap
from .errors import ParseError
from .fusion import PointCloud
from .geometry import CameraIntrinsics, Pose
from .matching import FlowField, ImageBuffer

FLO_MAGIC = 202021.25
FLOW_INVALID = 1e10


# --- images ---


def load_image(path) -> ImageBuffer:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ParseError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        scale = 65535.0
    else:
        raise ParseError(f"unsupported image dtype {arr.dtype} in {path}")
    return ImageBuffer(arr.astype(np.float64) / scale)


def write_image(path, img: ImageBuffer, bitdepth: int = 16) -> None:
    """Write as lossless PNG; grayscale uses the full 8- or 16-bit range."""
    px = img.pixels
    if bitdepth == 8:
        arr = np.round(px * 255.0).astype(np.uint8)
        out = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
    elif bitdepth == 16:
        if px.shape[2] != 1:
            raise ValueError("16-bit output supports grayscale only")
        arr = np.round(px[:, :, 0] * 65535.0).astype(np.uint16)
        out = Image.fromarray(arr)
    else:
        raise ValueError(f"unsupported bit depth {bitdepth}")
    out.save(path)


# --- cameras ---


def write_camera(path, K: CameraIntrinsics, pose: Pose) -> None:
    rows = list(K.as_matrix()) + list(pose.matrix34())
    text = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in rows)
    Path(path).write_text(text + "\n")


def load_camera(path):
    """Returns (CameraIntrinsics, Pose).  Image size is recovered from the
    principal point (width = 2*cx + 1 rounded), so cameras written by
    write_camera round-trip; foreign cameras may need explicit sizes."""
    try:
        values = [float(v) for v in Path(path).read_text().split()]
    except ValueError as exc:
        raise ParseError(f"camera file {path}: non-numeric token ({exc})") from exc
    if len(values) != 21:
        raise ParseError(f"camera file {path}: expected 21 numbers, got {len(values)}")
    k = np.array(values[:9]).reshape(3, 3)
    rt = np.array(values[9:]).reshape(3, 4)
    intr = CameraIntrinsics(
        fx=k[0, 0],
        fy=k[1, 1],
        cx=k[0, 2],
        cy=k[1, 2],
        width=int(round(2 * k[0, 2] + 1)),
        height=int(round(2 * k[1, 2] + 1)),
    )
    return intr, Pose(rt[:, :3], rt[:, 3])


def write_camera_sized(path, K: CameraIntrinsics, pose: Pose) -> None:
    """Camera text plus a sidecar with the exact image size."""
    write_camera(path, K, pose)
    write_keyvalues(str(path) + ".txt", {"width": K.width, "height": K.height})


def load_camera_sized(path):
    intr, pose = load_camera(path)
    sidecar = Path(str(path) + ".txt")
    if sidecar.exists():
        meta = read_keyvalues(sidecar)
        intr = CameraIntrinsics(
            fx=intr.fx,
            fy=intr.fy,
            cx=intr.cx,
            cy=intr.cy,
            width=int(meta["width"]),
            height=int(meta["height"]),
        )
    return intr, pose


# --- flow ---


def write_flow(path, flow: FlowField) -> None:
    h, w = flow.grid_height, flow.grid_width
    data = flow.flow.astype("<f4")
    data = np.where(flow.valid[:, :, None], data, np.float32(FLOW_INVALID))
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(data.astype("<f4").tobytes())


def load_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ParseError(f"flow file {path} truncated", offset=len(raw))
    (magic,) = struct.unpack_from("<f", raw, 0)
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise ParseError(f"flow file {path}: bad magic {magic}", offset=0)
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise ParseError(f"flow file {path}: bad size {w}x{h}", offset=4)
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise ParseError(
            f"flow file {path}: payload is {len(raw)} bytes, expected {expected}",
            offset=min(len(raw), expected),
        )
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float64)
    valid = np.abs(data).max(axis=2) <= 1e9
    data = np.where(valid[:, :, None], data, 0.0)
    return FlowField(data, valid)


# --- depth (PFM + sidecar) ---


def write_depth(path, depth: DepthMap) -> None:
    h, w = depth.depth.shape
    data = np.where(depth.valid, depth.depth, 0.0).astype("<f4")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(data[::-1].tobytes())  # PFM scanlines run bottom to top
    write_keyvalues(
        str(path) + ".txt",
        {"d_min": repr(depth.d_min), "d_max": repr(depth.d_max), "num_planes": depth.num_planes},
    )


def load_depth(path) -> DepthMap:
    raw = Path(path).read_bytes()
    header_end = 0
    fields = []
    for _ in range(3):
        nl = raw.find(b"\n", header_end)
        if nl < 0:
            raise ParseError(f"PFM {path}: truncated header", offset=header_end)
        fields.append(raw[header_end:nl])
        header_end = nl + 1
    if fields[0] != b"Pf":
        raise ParseError(f"PFM {path}: expected grayscale magic 'Pf', got {fields[0]!r}", offset=0)
    try:
        w, h = (int(v) for v in fields[1].split())
        scale = float(fields[2])
    except ValueError as exc:
        raise ParseError(f"PFM {path}: bad header ({exc})", offset=3) from exc
    if scale >= 0:
        raise ParseError(f"PFM {path}: big-endian scale {scale} unsupported", offset=len(fields[0]) + len(fields[1]) + 2)
    expected = header_end + 4 * w * h
    if len(raw) != expected:
        raise ParseError(
            f"PFM {path}: payload is {len(raw) - header_end} bytes, expected {4 * w * h}",
            offset=min(len(raw), expected),
        )
    data = np.frombuffer(raw, dtype="<f4", offset=header_end).reshape(h, w)[::-1]
    depth = data.astype(np.float64)
    valid = depth > 0
    meta_path = Path(str(path) + ".txt")
    if meta_path.exists():
        meta = read_keyvalues(meta_path)
        d_min = float(meta["d_min"])
        d_max = float(meta["d_max"])
        planes = int(meta["num_planes"])
        # float32 storage may nudge values past the recorded bounds
        if valid.any():
            d_min = min(d_min, float(depth[valid].min()))
            d_max = max(d_max, float(depth[valid].max()))
        return DepthMap(depth, valid, d_min=d_min, d_max=d_max, num_planes=planes)
    return DepthMap.from_depths(depth, valid)


# --- point clouds (PLY) ---


def write_ply(path, cloud: PointCloud, ascii_mode: bool = False) -> None:
    n = len(cloud)
    fmt = "ascii" if ascii_mode else "binary_little_endian"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar support\n"
        "end_header\n"
    )
    pts = cloud.points.astype("<f4")
    sup = np.clip(cloud.support_counts, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if ascii_mode:
            for p, s in zip(pts, sup):
                f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {int(s)}\n".encode("ascii"))
        else:
            rec = np.zeros(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("s", "u1")])
            rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
            rec["s"] = sup
            f.write(rec.tobytes())


def load_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ParseError(f"PLY {path}: missing end_header", offset=len(raw))
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body_start = end + len(b"end_header\n")
    if not header or header[0] != "ply":
        raise ParseError(f"PLY {path}: missing magic", offset=0)
    fmt = None
    n = None
    props = []
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise ParseError(f"PLY {path}: unsupported format {fmt}", offset=0)
    if n is None:
        raise ParseError(f"PLY {path}: no vertex element", offset=0)
    expected_props = [("float", "x"), ("float", "y"), ("float", "z"), ("uchar", "support")]
    if props != expected_props:
        raise ParseError(f"PLY {path}: unexpected properties {props}", offset=0)

    if fmt == "ascii":
        rows = raw[body_start:].decode("ascii").split()
        if len(rows) != 4 * n:
            raise ParseError(
                f"PLY {path}: expected {4 * n} ascii fields, got {len(rows)}",
                offset=body_start,
            )
        vals = np.array(rows, dtype=np.float64).reshape(n, 4)
        pts = vals[:, :3]
        sup = vals[:, 3].astype(np.int64)
    else:
        expected = body_start + 13 * n
        if len(raw) != expected:
            raise ParseError(
                f"PLY {path}: payload is {len(raw) - body_start} bytes, expected {13 * n}",
                offset=min(len(raw), expected),
            )
        rec = np.frombuffer(
            raw, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("s", "u1")], offset=body_start
        )
        pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        sup = rec["s"].astype(np.int64)
    return PointCloud(pts, sup, np.zeros(n))


# --- depth preview ---

# Compact blue->green->yellow->red ramp, interpolated to 256 entries.
_PREVIEW_ANCHORS = np.array(
    [
        [20, 11, 52],
        [45, 40, 146],
        [36, 95, 172],
        [31, 146, 154],
        [65, 185, 98],
        [156, 207, 42],
        [237, 200, 33],
        [250, 140, 40],
        [220, 60, 40],
        [150, 20, 30],
    ],
    dtype=np.float64,
)


def depth_preview(depth: DepthMap) -> np.ndarray:
    """8-bit color preview (H x W x 3): fixed ramp over [d_min, d_max],
    invalid pixels black."""
    t = (depth.depth - depth.d_min) / (depth.d_max - depth.d_min)
    t = np.clip(t, 0.0, 1.0)
    pos = t * (len(_PREVIEW_ANCHORS) - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, len(_PREVIEW_ANCHORS) - 1)
    frac = (pos - i0)[:, :, None]
    rgb = _PREVIEW_ANCHORS[i0] * (1 - frac) + _PREVIEW_ANCHORS[i1] * frac
    rgb[~depth.valid] = 0.0
    return np.round(rgb).astype(np.uint8)


def write_depth_preview(path, depth: DepthMap) -> None:
    Image.fromarray(depth_preview(depth)).save(path)


# --- key=value files ---


def write_keyvalues(path, mapping) -> None:
    lines = [f"{k}={v}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_keyvalues(path) -> dict:
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{i + 1}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
