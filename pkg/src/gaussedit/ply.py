"""Binary little-endian PLY persistence for Gaussian scenes.

Reads and writes the de-facto 3D-GS vertex layout: positions (x,y,z), degree-0
SH color (f_dc_0..2), pre-sigmoid opacity, log-scales (scale_0..2) and rotation
quaternion (rot_0..3, stored w,x,y,z). Normals are written as zeros for viewer
compatibility; unknown properties, including higher-order f_rest_* coefficients,
are ignored on load and never written.

The on-disk format is float32, so saving quantizes float64 scene values; a
load -> save cycle is byte-stable.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError, InvalidParameterError
from .scene import GaussianScene

_REQUIRED = (
    "x",
    "y",
    "z",
    "f_dc_0",
    "f_dc_1",
    "f_dc_2",
    "opacity",
    "scale_0",
    "scale_1",
    "scale_2",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
)

_SAVE_FIELDS = (
    ("x", "y", "z"),
    ("nx", "ny", "nz"),
    ("f_dc_0", "f_dc_1", "f_dc_2"),
    ("opacity",),
    ("scale_0", "scale_1", "scale_2"),
    ("rot_0", "rot_1", "rot_2", "rot_3"),
)

# PLY scalar type name -> little-endian numpy dtype string.
_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
}


def _parse_header(f) -> tuple[int, np.dtype]:
    """Parse the PLY header up to end_header; returns (vertex count, vertex dtype).

    Only the leading vertex element is read; trailing elements are ignored since
    vertex data starts immediately after the header.
    """
    magic = f.readline()
    if magic.strip() != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic)")

    fmt = None
    vertex_count = None
    fields: list[tuple[str, str]] = []
    in_vertex = False
    seen_vertex = False

    while True:
        raw = f.readline()
        if not raw:
            raise FormatError("truncated PLY header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        if line == "end_header":
            break
        parts = line.split()
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else ""
        elif parts[0] == "element":
            if len(parts) != 3:
                raise FormatError(f"malformed element line: {line!r}")
            if parts[1] == "vertex":
                if seen_vertex:
                    raise FormatError("multiple vertex elements")
                try:
                    vertex_count = int(parts[2])
                except ValueError:
                    raise FormatError(f"bad vertex count: {parts[2]!r}") from None
                in_vertex = True
                seen_vertex = True
            else:
                if not seen_vertex:
                    raise FormatError("vertex element must come first")
                in_vertex = False
        elif parts[0] == "property":
            if not in_vertex:
                continue
            if parts[1] == "list":
                raise FormatError("list properties in vertex element are unsupported")
            if len(parts) != 3:
                raise FormatError(f"malformed property line: {line!r}")
            type_name, prop_name = parts[1], parts[2]
            if type_name not in _PLY_TYPES:
                raise FormatError(f"unknown property type {type_name!r}")
            fields.append((prop_name, _PLY_TYPES[type_name]))
        else:
            raise FormatError(f"unexpected header line: {line!r}")

    if fmt != "binary_little_endian":
        raise FormatError(f"unsupported PLY format {fmt!r}; need binary_little_endian")
    if vertex_count is None:
        raise FormatError("no vertex element in PLY header")
    if not fields:
        raise FormatError("vertex element has no properties")
    return vertex_count, np.dtype(fields)


def load_ply(path: str | os.PathLike) -> GaussianScene:
    """Load a Gaussian scene from a binary little-endian PLY file.

    The editable range is not persisted; loaded scenes have an empty editable
    suffix.
    """
    with open(path, "rb") as f:
        count, dtype = _parse_header(f)
        missing = [name for name in _REQUIRED if name not in dtype.names]
        if missing:
            raise FormatError(f"PLY missing required properties: {', '.join(missing)}")
        data = np.fromfile(f, dtype=dtype, count=count)
    if data.shape[0] != count:
        raise FormatError(
            f"truncated PLY payload: expected {count} vertices, got {data.shape[0]}"
        )

    def cols(names) -> np.ndarray:
        return np.stack([data[n].astype(np.float64) for n in names], axis=1)

    scene = GaussianScene(
        mu=cols(("x", "y", "z")),
        log_scale=cols(("scale_0", "scale_1", "scale_2")),
        rot=cols(("rot_0", "rot_1", "rot_2", "rot_3")),
        sh0=cols(("f_dc_0", "f_dc_1", "f_dc_2")),
        opacity_logit=data["opacity"].astype(np.float64),
        editable_start=count,
    )
    for name in ("mu", "log_scale", "rot", "sh0", "opacity_logit"):
        if not np.all(np.isfinite(getattr(scene, name))):
            raise InvalidParameterError(f"PLY contains non-finite values in {name}")
    return scene


def save_ply(scene: GaussianScene, path: str | os.PathLike) -> None:
    """Write a scene as binary little-endian PLY in the de-facto 3D-GS layout.

    Values are stored as float32 (the interchange precision); normals are
    written as zeros.
    """
    for name in ("mu", "log_scale", "rot", "sh0", "opacity_logit"):
        if not np.all(np.isfinite(getattr(scene, name))):
            raise InvalidParameterError(f"cannot save non-finite values in {name}")

    n = len(scene)
    names = [name for group in _SAVE_FIELDS for name in group]
    dtype = np.dtype([(name, "<f4") for name in names])
    data = np.zeros(n, dtype=dtype)
    for i, axis in enumerate("xyz"):
        data[axis] = scene.mu[:, i]
    for i in range(3):
        data[f"f_dc_{i}"] = scene.sh0[:, i]
        data[f"scale_{i}"] = scene.log_scale[:, i]
    data["opacity"] = scene.opacity_logit
    for i in range(4):
        data[f"rot_{i}"] = scene.rot[:, i]

    header_lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header_lines += [f"property float {name}" for name in names]
    header_lines.append("end_header")
    header = ("\n".join(header_lines) + "\n").encode("ascii")

    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        data.tofile(f)
    os.replace(tmp, path)
