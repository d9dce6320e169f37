"""Dataset manifests and image I/O.

A dataset is a JSON manifest next to its images:

    {"w": 64, "h": 64, "fl_x": 72.0, "fl_y": 72.0, "cx": 32.0, "cy": 32.0,
     "srgb": false, "background": [0.5, 0.5, 0.5],
     "frames": [{"file": "view_000.png",
                 "transform": [[...], [...], [...], [0, 0, 0, 1]]}]}

``transform`` is the row-major 4x4 world-from-camera pose.  Frames may
override the global intrinsics with their own w/h/fl_x/... keys.  Images
(PNG or PPM) decode to linear floats in [0, 1]; set ``"srgb": true`` when the
files store sRGB-encoded values.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import Camera

RIGID_TOL = 1e-6


@dataclass
class Dataset:
    cameras: list
    images: list
    files: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    srgb: bool = False

    def __len__(self):
        return len(self.cameras)


def canonical_json(obj):
    """Deterministic JSON text: sorted keys, floats at 17 significant digits."""
    def emit(x):
        if isinstance(x, dict):
            items = sorted(x.items())
            return "{" + ", ".join(f"{json.dumps(k)}: {emit(v)}" for k, v in items) + "}"
        if isinstance(x, (list, tuple, np.ndarray)):
            return "[" + ", ".join(emit(v) for v in x) + "]"
        if isinstance(x, bool) or x is None:
            return json.dumps(x)
        if isinstance(x, (float, np.floating)):
            return f"{float(x):.17g}"
        if isinstance(x, (int, np.integer)):
            return str(int(x))
        return json.dumps(x)
    return emit(obj) + "\n"


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1 / 2.4) - 0.055)


def read_image(path, srgb=False):
    """Decode a PNG/PPM file to (H, W, 3) float64 in [0, 1]."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if srgb:
        arr = srgb_to_linear(arr)
    return arr


def write_image(path, img):
    """Write a float image (clamped to [0, 1]) as an 8-bit PNG."""
    data = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    quant = np.round(data * 255.0).astype(np.uint8)
    Image.fromarray(quant, mode="RGB").save(path, format="PNG")


def _validate_transform(m, where):
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"{where}: transform must be 4x4, got {m.shape}")
    if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > RIGID_TOL:
        raise ValueError(f"{where}: transform bottom row is not [0, 0, 0, 1]")
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > RIGID_TOL:
        raise ValueError(f"{where}: rotation block is not orthonormal "
                         f"(non-rigid beyond {RIGID_TOL})")
    if np.linalg.det(r) < 0:
        raise ValueError(f"{where}: rotation block is reflected (det < 0)")
    return m


def load_dataset(manifest_path):
    """Load a manifest and its images; raises descriptive errors on bad data."""
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        spec = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    srgb = bool(spec.get("srgb", False))
    background = np.asarray(spec.get("background", [0.0, 0.0, 0.0]),
                            dtype=np.float64).reshape(3)
    frames = spec.get("frames", [])
    if not frames:
        raise ValueError(f"manifest {manifest_path} has no frames")

    cameras, images, files = [], [], []
    for idx, frame in enumerate(frames):
        where = f"frame {idx}"

        def intrinsic(key):
            if key in frame:
                return frame[key]
            if key in spec:
                return spec[key]
            raise ValueError(f"{where}: missing intrinsic {key!r}")

        w, h = int(intrinsic("w")), int(intrinsic("h"))
        m = _validate_transform(frame.get("transform"), where)
        cam = Camera.from_matrix(w, h, float(intrinsic("fl_x")),
                                 float(intrinsic("fl_y")),
                                 float(intrinsic("cx")), float(intrinsic("cy")), m)
        path = os.path.join(base, frame["file"])
        img = read_image(path, srgb=srgb)
        if img.shape[:2] != (h, w):
            raise ValueError(f"{where}: image {frame['file']} is "
                             f"{img.shape[1]}x{img.shape[0]}, manifest says {w}x{h}")
        cameras.append(cam)
        images.append(img)
        files.append(frame["file"])
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ValueError(f"dataset images disagree on resolution: {sorted(shapes)}")
    return Dataset(cameras, images, files, background, srgb)


def write_manifest(path, width, height, fx, fy, cx, cy, frames, *,
                   srgb=False, background=(0.0, 0.0, 0.0)):
    """Write a manifest; ``frames`` is a list of (file name, 4x4 pose)."""
    doc = {
        "w": width, "h": height, "fl_x": fx, "fl_y": fy, "cx": cx, "cy": cy,
        "srgb": srgb, "background": list(background),
        "frames": [{"file": name, "transform": np.asarray(m).tolist()}
                   for name, m in frames],
    }
    with open(path, "w") as fh:
        fh.write(canonical_json(doc))
