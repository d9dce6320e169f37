"""Bit-exact binary scene files (magic "SGS1").

Layout: a fixed little-endian header followed by the raw float64 scene
arrays in a fixed order.  Loading a saved scene reproduces every scalar to
the bit; truncated or oversized files are rejected outright.
"""

import struct

import numpy as np

from .appearance import TAG_NAMES, svf_width
from .scene import Scene
from .sh import n_coeffs

MAGIC = b"SGS1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBIIIIdQ")


class SceneFileError(ValueError):
    pass


def save_scene(scene, path):
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, scene.tag, scene.k,
                          scene.hidden, scene.sh_degree, scene.active_sh_degree,
                          scene.lambda_e, scene.n)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (scene.centers, scene.quats, scene.log_scales,
                    scene.sh, scene.svf):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_scene(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise SceneFileError(f"scene file {path} is truncated (no header)")
    magic, version, tag, k, hidden, sh_degree, active, lambda_e, count = \
        _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise SceneFileError(f"scene file {path} has bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SceneFileError(f"scene file {path} has unsupported format "
                             f"version {version}")
    if tag not in TAG_NAMES:
        raise SceneFileError(f"scene file {path} has unknown variant tag {tag}")
    variant = TAG_NAMES[tag]
    c = n_coeffs(sh_degree)
    p = svf_width(variant, k, hidden)
    shapes = [(count, 3), (count, 4), (count, 2), (count, c, 3), (count, p)]
    need = _HEADER.size + sum(int(np.prod(s)) for s in shapes) * 8
    if len(blob) != need:
        raise SceneFileError(f"scene file {path} has {len(blob)} bytes, "
                             f"expected {need} (truncated or corrupt)")
    arrays = []
    off = _HEADER.size
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        arrays.append(np.frombuffer(blob[off:off + size], dtype="<f8")
                      .astype(np.float64).reshape(shape))
        off += size
    return Scene(variant, arrays[0], arrays[1], arrays[2], arrays[3], arrays[4],
                 k=k, hidden=hidden, lambda_e=lambda_e,
                 sh_degree=sh_degree, active_sh_degree=active)
