"""File formats: PLY point clouds and Gaussian exports, OBJ meshes, PNG and raw float images."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .gaussians import GaussianCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

GAUSSIAN_PROPS = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
                  "opacity", "r", "g", "b"]


class PlyError(ValueError):
    pass


def read_ply(path) -> dict[str, np.ndarray]:
    """Vertex properties of an ASCII or binary little-endian PLY file."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError(f"{path}: not a PLY file")
    nl = data.index(b"\n", end)
    header = data[:nl].decode("ascii").splitlines()
    body = data[nl + 1:]
    fmt, n_vertex, props, in_vertex = None, 0, [], False
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif n_vertex == 0:
                raise PlyError("vertex element must come first")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise PlyError("list properties on vertices are not supported")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        arr = np.frombuffer(body, dtype=dtype, count=n_vertex)
        return {name: arr[name].copy() for name, _ in props}
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")[:n_vertex]
        table = np.array([r.split() for r in rows], dtype=np.float64).reshape(n_vertex, len(props))
        return {name: table[:, k].astype(t) for k, (name, t) in enumerate(props)}
    raise PlyError(f"unsupported PLY format {fmt!r}")


def write_ply(path, columns: dict[str, np.ndarray], binary: bool = True):
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    n = len(arrays[0])
    type_names = {"f4": "float", "f8": "double", "u1": "uchar", "i4": "int", "u4": "uint"}
    kinds = [a.dtype.str[1:] for a in arrays]
    header = ["ply", "format " + ("binary_little_endian 1.0" if binary else "ascii 1.0"), f"element vertex {n}"]
    header += [f"property {type_names[k]} {name}" for k, name in zip(kinds, names)]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        rec = np.empty(n, dtype=[(name, "<" + k) for name, k in zip(names, kinds)])
        for name, a in zip(names, arrays):
            rec[name] = a
        Path(path).write_bytes(head + rec.tobytes())
    else:
        lines = [" ".join(repr(a[i].item()) for a in arrays) for i in range(n)]
        Path(path).write_bytes(head + ("\n".join(lines) + "\n").encode("ascii"))


def read_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """xyz (M x 3) and optional 0..1 colors from a point-cloud PLY."""
    cols = read_ply(path)
    pts = np.stack([cols["x"], cols["y"], cols["z"]], 1).astype(np.float64)
    colors = None
    if all(k in cols for k in ("red", "green", "blue")):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], 1).astype(np.float64)
        if cols["red"].dtype == np.uint8:
            colors /= 255.0
    return pts, colors


def write_points(path, points: np.ndarray, colors: np.ndarray | None = None, binary: bool = True):
    cols = {"x": points[:, 0].astype("f4"), "y": points[:, 1].astype("f4"), "z": points[:, 2].astype("f4")}
    if colors is not None:
        rgb = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype("u1")
        cols.update(red=rgb[:, 0], green=rgb[:, 1], blue=rgb[:, 2])
    write_ply(path, cols, binary)


def write_gaussians(path, cloud: GaussianCloud, binary: bool = True):
    """Raw parameters: log-scales, raw quaternion, opacity logit, color logits."""
    mats = [cloud.positions, cloud.log_scales, cloud.rotations, cloud.opacity_logits, cloud.color_params]
    flat = np.concatenate([m.astype(np.float32) for m in mats], axis=1)
    write_ply(path, {name: flat[:, k] for k, name in enumerate(GAUSSIAN_PROPS)}, binary)


def read_gaussians(path, dtype=np.float32) -> GaussianCloud:
    cols = read_ply(path)
    missing = [p for p in GAUSSIAN_PROPS if p not in cols]
    if missing:
        raise PlyError(f"{path}: missing Gaussian properties {missing}")
    g = lambda *names: np.stack([cols[n] for n in names], 1).astype(dtype)  # noqa: E731
    return GaussianCloud(
        positions=g("x", "y", "z"),
        log_scales=g("scale_0", "scale_1", "scale_2"),
        rotations=g("rot_0", "rot_1", "rot_2", "rot_3"),
        color_params=g("r", "g", "b"),
        opacity_logits=g("opacity"),
    )


def is_gaussian_ply(path) -> bool:
    head = Path(path).read_bytes()[:4096]
    return b"property float scale_0" in head or b"property double scale_0" in head


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangle faces (0-based) from v/f records; polygons are fan-triangulated."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(v) for v in tok[1:4]])
        elif tok[0] == "f":
            idx = []
            for t in tok[1:]:
                k = int(t.split("/")[0])
                idx.append(k - 1 if k > 0 else len(verts) + k)
            for a in range(1, len(idx) - 1):
                faces.append([idx[0], idx[a], idx[a + 1]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_png(path, image: np.ndarray):
    """8-bit sRGB PNG from a linear-in-[0,1] H x W x 3 (or H x W) array, no color transform."""
    from PIL import Image

    img = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


RAW_MAGIC = b"GSRF"


def write_raw(path, image: np.ndarray):
    """Float32 dump: magic, uint32 H, W, channels, then row-major little-endian data."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    Path(path).write_bytes(RAW_MAGIC + struct.pack("<III", h, w, c) + arr.tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: bad raw image magic")
    h, w, c = struct.unpack_from("<III", data, 4)
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c)
