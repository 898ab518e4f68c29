"""Volume, scene and image files.

Volumes are stored as JSON text::

    {"degrees": [2, 2, 2],
     "knots": [[...], [...], [...]],
     "dims": [n0, n1, n2],
     "dim": 3,
     "points": [x, y, z, x, y, z, ...]}

with the control points listed in row-major order of ``(i, j, k)``.

Scenes are JSON documents validated against ``SCENE_SCHEMA``. Relative file
references are resolved against the directory of the scene file.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from .inversion import METHODS, IntegratorSpec
from .pipeline import DEFAULT_DS_FRACTION, XI_FRACTION, Block, CutPlane, Scene, VoxelGrid, scene_bounds
from .rayscene import Camera
from .shading import FIELD_KINDS, FieldSource, TransferFunction
from .splinecore import BSplineVolume, TensorSpline
from .surfnet import DEFAULT_TOL_PX


class SceneError(ValueError):
    """Invalid scene or volume file."""


_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_RGB = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 3, "maxItems": 3}

SCENE_SCHEMA = {
    "type": "object",
    "required": ["camera", "blocks", "transfer_function"],
    "additionalProperties": False,
    "properties": {
        "camera": {
            "type": "object",
            "required": ["eye", "look_at", "width", "height"],
            "additionalProperties": False,
            "properties": {
                "eye": _VEC3,
                "look_at": _VEC3,
                "up": _VEC3,
                "fov_y_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
                "width": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
                "near": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "blocks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["volume"],
                "additionalProperties": False,
                "properties": {
                    "volume": {"type": "string"},
                    "field": {"enum": list(FIELD_KINDS)},
                    "scalar": {"type": "string"},
                    "displacement": {"type": "string"},
                    "name": {"type": "string"},
                },
            },
        },
        "transfer_function": {
            "type": "object",
            "required": ["nodes"],
            "additionalProperties": False,
            "properties": {
                "nodes": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["value", "color", "alpha"],
                        "additionalProperties": False,
                        "properties": {
                            "value": {"type": "number"},
                            "color": _RGB,
                            "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                        },
                    },
                },
                "xi": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "cut_planes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["point", "normal"],
                "additionalProperties": False,
                "properties": {"point": _VEC3, "normal": _VEC3},
            },
        },
        "integrator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": list(METHODS)},
                "c": {"type": "number", "minimum": 0},
                "ds": {"type": "number", "exclusiveMinimum": 0},
                "tol": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "image": {"type": "string"},
                "flags": {"type": "string"},
                "supersample": {"type": "boolean"},
                "background": {"oneOf": [{"const": "checker"}, _RGB]},
                "tol_px": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------


def volume_to_dict(vol: TensorSpline) -> dict:
    return {
        "degrees": list(vol.degrees),
        "knots": [kv.knots.tolist() for kv in vol.knot_vectors],
        "dims": list(vol.coefs.shape[:-1]),
        "dim": int(vol.dim),
        "points": vol.coefs.ravel().tolist(),
    }


def volume_from_dict(data: dict) -> BSplineVolume:
    try:
        dims = [int(n) for n in data["dims"]]
        dim = int(data.get("dim", 3))
        pts = np.asarray(data["points"], dtype=float)
        if pts.size != int(np.prod(dims)) * dim:
            raise ValueError(f"expected {int(np.prod(dims)) * dim} point coordinates, got {pts.size}")
        return BSplineVolume(data["knots"], data["degrees"], pts.reshape(*dims, dim))
    except KeyError as exc:
        raise ValueError(f"missing key {exc.args[0]!r}") from None


def save_volume(vol: TensorSpline, path) -> None:
    Path(path).write_text(json.dumps(volume_to_dict(vol)))


def load_volume(path) -> BSplineVolume:
    """Read a volume file; any problem is reported together with the file name."""
    path = Path(path)
    try:
        return volume_from_dict(json.loads(path.read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise SceneError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def _error_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate_scene(data: dict) -> None:
    """Raise ``SceneError`` listing every schema violation with its field path."""
    validator = jsonschema.Draft202012Validator(SCENE_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = [f"{_error_path(e)}: {e.message}" for e in errors]
        raise SceneError("invalid scene:\n  " + "\n  ".join(lines))
    for i, b in enumerate(data["blocks"]):
        kind = b.get("field", "rho")
        if kind == "rho" and "scalar" not in b:
            raise SceneError(f"invalid scene:\n  blocks/{i}: a rho field needs 'scalar'")
        if kind == "vonmises" and "displacement" not in b:
            raise SceneError(f"invalid scene:\n  blocks/{i}: a vonmises field needs 'displacement'")


def _resolve(ref: str, base: Path) -> str:
    p = Path(ref)
    return str(p if p.is_absolute() else (base / p).resolve())


def fill_defaults(data: dict, base_dir=".") -> dict:
    """Validated copy of ``data`` with defaults filled and file paths made absolute.

    The sample distance and the opacity reference length depend on the
    scene size, so the referenced volumes are read to compute them.
    """
    validate_scene(data)
    cfg = copy.deepcopy(data)
    base = Path(base_dir)
    cam = cfg["camera"]
    cam.setdefault("up", [0.0, 0.0, 1.0])
    cam.setdefault("fov_y_deg", 45.0)
    cam.setdefault("near", 1e-3)
    for b in cfg["blocks"]:
        b.setdefault("field", "rho")
        b.setdefault("name", "")
        for key in ("volume", "scalar", "displacement"):
            if key in b:
                b[key] = _resolve(b[key], base)
    cfg.setdefault("cut_planes", [])
    out = cfg.setdefault("output", {})
    out.setdefault("supersample", True)
    out.setdefault("background", "checker")
    out.setdefault("tol_px", DEFAULT_TOL_PX)
    for key in ("image", "flags"):
        if key in out:
            out[key] = _resolve(out[key], base)

    volumes = [load_volume(b["volume"]) for b in cfg["blocks"]]
    lo, hi = scene_bounds([Block(v, FieldSource("quality")) for v in volumes])
    diag = float(np.linalg.norm(hi - lo))
    integ = cfg.setdefault("integrator", {})
    method = integ.setdefault("method", "rk2")
    integ.setdefault("c", 100.0 if method == "irk1" else 1.0)
    integ.setdefault("ds", DEFAULT_DS_FRACTION[method] * diag)
    integ.setdefault("tol", None)
    cfg["transfer_function"].setdefault("xi", XI_FRACTION * diag)
    return cfg


def load_scene_config(path) -> dict:
    """Parse, validate and default-fill a scene file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneError(f"{path}: {exc}") from exc
    return fill_defaults(data, path.parent)


def scene_from_config(cfg: dict) -> Scene:
    """Build a renderable ``Scene`` from a default-filled configuration."""
    c = cfg["camera"]
    cam = Camera(c["eye"], c["look_at"], c["up"], np.radians(c["fov_y_deg"]), c["width"], c["height"], c["near"])
    blocks = []
    for b in cfg["blocks"]:
        kind = b["field"]
        spline = None
        if kind == "rho":
            spline = load_volume(b["scalar"])
        elif kind == "vonmises":
            spline = load_volume(b["displacement"])
        blocks.append(Block(load_volume(b["volume"]), FieldSource(kind, spline), b["name"]))
    tfc = cfg["transfer_function"]
    nodes = [(n["value"], n["color"], n["alpha"]) for n in tfc["nodes"]]
    try:
        tf = TransferFunction.from_nodes(nodes, xi=tfc["xi"])
    except ValueError as exc:
        raise SceneError(f"invalid scene:\n  transfer_function/nodes: {exc}") from None
    ic = cfg["integrator"]
    spec = IntegratorSpec(ic["method"], c=ic["c"], ds=ic["ds"], tol=ic["tol"])
    planes = [CutPlane(p["point"], p["normal"]) for p in cfg["cut_planes"]]
    out = cfg["output"]
    return Scene(cam, blocks, tf, spec, planes, out["background"], out["supersample"], out["tol_px"])


def load_scene(path) -> Scene:
    return scene_from_config(load_scene_config(path))


def save_scene(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2))


def export_scene(scene: Scene, directory, stem: str = "scene") -> Path:
    """Write ``scene`` and its volumes into ``directory``; returns the scene file path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cam = scene.camera
    blocks = []
    for i, b in enumerate(scene.blocks):
        entry = {"volume": f"{stem}_block{i}.json", "field": b.field.kind, "name": b.name}
        save_volume(b.volume, d / entry["volume"])
        if b.field.kind == "rho":
            entry["scalar"] = f"{stem}_block{i}_scalar.json"
            save_volume(b.field.spline, d / entry["scalar"])
        elif b.field.kind == "vonmises":
            entry["displacement"] = f"{stem}_block{i}_disp.json"
            save_volume(b.field.spline, d / entry["displacement"])
        blocks.append(entry)
    spec = scene.integrator
    bg = scene.background if isinstance(scene.background, str) else [float(x) for x in scene.background]
    cfg = {
        "camera": {
            "eye": cam.eye.tolist(),
            "look_at": cam.look_at.tolist(),
            "up": cam.up.tolist(),
            "fov_y_deg": float(np.degrees(cam.fov_y)),
            "width": cam.width,
            "height": cam.height,
            "near": float(cam.near),
        },
        "blocks": blocks,
        "transfer_function": {
            "nodes": [{"value": v, "color": list(c), "alpha": a} for v, c, a in scene.transfer.nodes()],
            "xi": scene.transfer.xi,
        },
        "cut_planes": [{"point": p.point.tolist(), "normal": p.normal.tolist()} for p in scene.cut_planes],
        "integrator": {"method": spec.method, "c": float(spec.c), "ds": float(spec.ds), "tol": spec.tol},
        "output": {"supersample": bool(scene.supersample), "background": bg, "tol_px": float(scene.tol_px)},
    }
    validate_scene(cfg)
    path = d / f"{stem}.json"
    save_scene(cfg, path)
    return path


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def to_uint8(img) -> np.ndarray:
    """Float images in [0, 1] are rounded to 8 bits; uint8 input is returned as is."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img) -> None:
    """Write an (H, W, 3) image as binary PPM (``.ppm``) or PNG (``.png``)."""
    path = Path(path)
    data = to_uint8(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {data.shape}")
    if path.suffix.lower() == ".png":
        Image.fromarray(data, "RGB").save(path, format="PNG")
        return
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def _ppm_tokens(raw: bytes, count: int):
    """The first ``count`` header tokens of a PPM file and the payload offset."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        tokens.append(raw[i:j])
        i = j
    return tokens, i + 1  # single whitespace byte before the pixel data


def read_image(path) -> np.ndarray:
    """Read a PPM (P6, 8-bit) or any Pillow-readable image as (H, W, 3) uint8."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] != b"P6":
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    (magic, w, h, maxval), start = _ppm_tokens(raw, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM files are supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=start)
    return data.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# voxel grids
# ---------------------------------------------------------------------------


def save_voxel_grid(grid, path) -> None:
    np.savez_compressed(path, lo=grid.lo, hi=grid.hi, value=grid.value, inside=grid.inside)


def load_voxel_grid(path) -> VoxelGrid:
    with np.load(path) as data:
        return VoxelGrid(data["lo"], data["hi"], data["value"], data["inside"])
