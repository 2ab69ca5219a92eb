"""Binary array archives: one .bin file per array plus a plain-text manifest.

Arrays are stored little-endian. The manifest has one line per array:
``name dtype dim0,dim1,...`` and is the single source of truth for shapes.
"""

from __future__ import annotations

import os

import numpy as np

_DTYPES = {
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}

MANIFEST_NAME = "manifest.txt"


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == np.dtype(dt.str.lstrip("<")):
            return name
    raise ValueError(f"unsupported dtype for archive: {arr.dtype}")


def save_arrays(directory: str, arrays: dict[str, np.ndarray]) -> None:
    """Write every array to ``directory`` and (re)write the manifest."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name, arr in arrays.items():
        if "/" in name or " " in name:
            raise ValueError(f"invalid array name: {name!r}")
        arr = np.ascontiguousarray(arr)
        dtype = _dtype_name(arr)
        arr.astype(_DTYPES[dtype]).tofile(os.path.join(directory, name + ".bin"))
        shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        lines.append(f"{name} {dtype} {shape}\n")
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        fh.writelines(lines)


def load_arrays(directory: str) -> dict[str, np.ndarray]:
    """Load every array listed in the manifest of ``directory``."""
    manifest = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest in {directory}")
    out: dict[str, np.ndarray] = {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, dtype, shape_s = line.split()
            if dtype not in _DTYPES:
                raise ValueError(f"unknown dtype {dtype!r} in manifest")
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
            path = os.path.join(directory, name + ".bin")
            arr = np.fromfile(path, dtype=_DTYPES[dtype])
            expected = int(np.prod(shape)) if shape else 1
            if arr.size != expected:
                raise ValueError(
                    f"array {name!r}: file has {arr.size} elements, manifest says {expected}"
                )
            out[name] = arr.reshape(shape)
    return out


def save_keyvalues(path: str, values: dict[str, object]) -> None:
    """Plain-text key = value config, dotted keys, one per line."""
    with open(path, "w") as fh:
        for key, val in values.items():
            fh.write(f"{key} = {val!r}\n" if isinstance(val, str) else f"{key} = {val}\n")


def load_keyvalues(path: str) -> dict[str, object]:
    out: dict[str, object] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key] = _parse_value(val)
    return out


def _parse_value(text: str) -> object:
    if text.startswith(("'", '"')) and text.endswith(text[0]) and len(text) >= 2:
        return text[1:-1]
    if text in ("True", "False"):
        return text == "True"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text
