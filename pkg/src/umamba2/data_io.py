"""Raw+JSON volume files, the procedural dental phantom, and the L/R symmetry audit.

Axis order is fixed: 0 superior/inferior, 1 anterior/posterior, 2 left/right.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .schema import LabelSchema

VOLUME_FORMAT_VERSION = 1
AXIS_LABELS = ["SI", "AP", "LR"]
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "u16": np.dtype("<u2")}


class DataError(ValueError):
    pass


class LengthMismatchError(DataError):
    pass


class UnknownDtypeError(DataError):
    pass


class VersionMismatchError(DataError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    @property
    def dims(self) -> tuple:
        return self.data.shape


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".raw", ".json") else path
    return stem.with_suffix(".raw"), stem.with_suffix(".json")


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    raise UnknownDtypeError(f"cannot store dtype {arr.dtype}; supported: {sorted(DTYPES)}")


def write_volume(path: str | Path, volume: Volume | np.ndarray, spacing_mm=None, extra: dict | None = None) -> Path:
    """Write ``<stem>.raw`` plus ``<stem>.json``; returns the sidecar path.

    ``extra`` (e.g. a config echo) is stored under ``provenance`` and ignored on read.
    """
    if not isinstance(volume, Volume):
        volume = Volume(np.asarray(volume), tuple(spacing_mm or (1.0, 1.0, 1.0)))
    arr = volume.data
    if arr.ndim != 3:
        raise DataError(f"volumes are 3D, got shape {arr.shape}")
    tag = _dtype_tag(arr)
    raw, sidecar = _paths(path)
    raw.write_bytes(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    meta = {"dims": list(arr.shape), "spacing_mm": [float(s) for s in volume.spacing_mm], "dtype": tag,
            "axis_labels": AXIS_LABELS, "format_version": VOLUME_FORMAT_VERSION, "payload": raw.name}
    if extra:
        meta["provenance"] = extra
    sidecar.write_text(json.dumps(meta, indent=1))
    return sidecar


def read_volume(path: str | Path) -> Volume:
    raw, sidecar = _paths(path)
    meta = json.loads(sidecar.read_text())
    if meta.get("format_version") != VOLUME_FORMAT_VERSION:
        raise VersionMismatchError(f"{sidecar}: format_version {meta.get('format_version')} "
                                   f"!= {VOLUME_FORMAT_VERSION}")
    if meta.get("dtype") not in DTYPES:
        raise UnknownDtypeError(f"{sidecar}: unknown dtype {meta.get('dtype')!r}")
    dt = DTYPES[meta["dtype"]]
    dims = tuple(int(d) for d in meta["dims"])
    payload = raw.read_bytes()
    expected = math.prod(dims) * dt.itemsize
    if len(payload) != expected:
        raise LengthMismatchError(f"{raw}: expected {expected} bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    return Volume(data, tuple(meta["spacing_mm"]))


# -- phantom -----------------------------------------------------------------

@dataclass
class PhantomConfig:
    extents: list = field(default_factory=lambda: [32, 32, 32])
    num_tooth_pairs: int = 2
    nerve_radius: float = 1.2
    tiny_scale: float = 1.0
    noise_sigma: float = 0.05
    jitter: float = 1.0
    spacing_mm: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


TOOTH_KINDS = ("canine", "molar")
# arc angle of each tooth kind and its ellipsoid radii (SI, along-arc, across-arc) in 32-voxel units
TOOTH_LAYOUT = {"canine": (0.5, (3.5, 2.5, 2.5)), "molar": (1.25, (3.5, 3.2, 3.0))}
INTENSITY = {"bone": 0.6, "tooth": 1.0, "canal": 0.25}


def _class_id(schema: LabelSchema, name: str) -> int:
    for c in schema.classes:
        if c.name == name:
            return c.id
    raise DataError(f"schema has no class named {name!r}, needed by the phantom generator")


def generate_phantom(cfg: PhantomConfig, schema: LabelSchema) -> tuple[Volume, Volume]:
    """Synthetic jaw: two bone arcs, mirror-paired teeth, dark nerve canals, one midline foramen.

    Returns ``(image, labels)``; a pure function of ``(cfg, schema)``.
    """
    ext = np.array(cfg.extents, dtype=int)
    if ext.shape != (3,) or np.any(ext < 32):
        raise DataError(f"phantom extents must be >= 32 per axis, got {cfg.extents}")
    if not 0 <= cfg.num_tooth_pairs <= len(TOOTH_KINDS):
        raise DataError(f"num_tooth_pairs must be in [0, {len(TOOTH_KINDS)}]")
    rng = np.random.default_rng(cfg.seed)
    s = ext / 32.0
    jit = lambda: rng.uniform(-cfg.jitter, cfg.jitter)

    si, ap, lr = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in ext), indexing="ij")
    radius = 11.0 * min(s[1], s[2]) + 0.5 * jit()
    centre_ap = (4.0 + jit() * 0.5) * s[1] + radius
    centre_lr = (ext[2] - 1) / 2.0
    d_ap, d_lr = ap - centre_ap, lr - centre_lr
    rho = np.hypot(d_ap, d_lr)
    theta = np.arctan2(d_lr, -d_ap)  # 0 at the anterior midline, >0 towards larger LR index
    theta_max = 1.75
    on_arc = np.abs(theta) <= theta_max

    labels = np.zeros(tuple(ext), dtype=np.uint8)
    image = np.zeros(tuple(ext), dtype=np.float64)

    def paint(mask, cls, value):
        labels[mask] = cls
        image[mask] = value

    half_w = 3.0 * s[1]
    mand_lo, mand_hi = (18 + jit()) * s[0], 28 * s[0]
    max_lo, max_hi = 3 * s[0], (11 + jit()) * s[0]
    band = on_arc & (np.abs(rho - radius) <= half_w)
    paint(band & (si >= mand_lo) & (si <= mand_hi), _class_id(schema, "mandible"), INTENSITY["bone"])
    paint(band & (si >= max_lo) & (si <= max_hi), _class_id(schema, "maxilla"), INTENSITY["bone"])

    tooth_si = 0.5 * (max_hi + mand_lo)
    for kind in TOOTH_KINDS[:cfg.num_tooth_pairs]:
        angle, radii = TOOTH_LAYOUT[kind]
        angle += 0.04 * jit()
        r_si, r_along, r_across = radii[0] * s[0], radii[1] * s[2], radii[2] * s[1]
        for side, sign in (("left", 1.0), ("right", -1.0)):
            a = sign * angle + 0.02 * jit()  # small per-side jitter keeps pairs only near-mirrored
            along = rho * (theta - a)
            inside = (((si - tooth_si) / r_si) ** 2 + (along / r_along) ** 2
                      + ((rho - radius) / r_across) ** 2) <= 1.0
            paint(inside, _class_id(schema, f"{kind}_{side}"), INTENSITY["tooth"])

    canal_si = 0.5 * (mand_lo + mand_hi) + 0.5 * jit()
    tube = np.hypot(si - canal_si, rho - radius)
    nerve_r = cfg.nerve_radius * min(s)
    tiny_r = 0.75 * cfg.nerve_radius * cfg.tiny_scale * min(s)
    for side, sign in (("left", 1.0), ("right", -1.0)):
        t = sign * theta
        paint((tube <= nerve_r) & (t >= 0.75) & (t <= theta_max - 0.1),
              _class_id(schema, f"alveolar_canal_{side}"), INTENSITY["canal"])
        paint((tube <= tiny_r) & (t >= 0.2) & (t < 0.75),
              _class_id(schema, f"incisive_canal_{side}"), INTENSITY["canal"])
    foramen = np.sqrt((si - canal_si) ** 2 + (ap - (centre_ap - radius + 2.0 * s[1])) ** 2
                      + (lr - centre_lr) ** 2) <= 1.3 * cfg.tiny_scale * min(s)
    paint(foramen, _class_id(schema, "lingual_foramen"), INTENSITY["canal"])

    image += rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    missing = sorted(set(range(1, schema.num_classes)) - set(np.unique(labels).tolist()))
    if missing:
        raise DataError(f"extents {tuple(ext)} too small to place classes {missing}")
    spacing = tuple(float(v) for v in cfg.spacing_mm)
    return Volume(image.astype(np.float32), spacing), Volume(labels, spacing)


def mirror_consistency_check(volume, labels, schema: LabelSchema) -> dict:
    """Mean foreground Dice between labels and their L/R mirror with partner ids swapped."""
    lab = labels.data if isinstance(labels, Volume) else np.asarray(labels)
    if not schema.has_partners():
        return {"skipped": True, "notice": "schema has no laterality partners; symmetry check skipped"}
    mirrored = schema.partner_map()[lab[:, :, ::-1]]
    per_class = {}
    for k in range(1, schema.num_classes):
        a, b = lab == k, mirrored == k
        denom = a.sum() + b.sum()
        if denom:
            per_class[schema.classes[k].name] = float(2.0 * np.logical_and(a, b).sum() / denom)
    return {"skipped": False, "per_class": per_class,
            "symmetry_dice": float(np.mean(list(per_class.values()))) if per_class else 1.0}


def load_dataset(directory: str | Path) -> list[tuple[str, Volume, Volume]]:
    """Pairs ``<case>_image`` / ``<case>_label`` in a directory, sorted by case name."""
    directory = Path(directory)
    cases = []
    for sidecar in sorted(directory.glob("*_image.json")):
        case = sidecar.name[: -len("_image.json")]
        label_path = directory / f"{case}_label.json"
        if not label_path.exists():
            raise DataError(f"{sidecar}: no matching label volume {label_path.name}")
        cases.append((case, read_volume(sidecar), read_volume(label_path)))
    if not cases:
        raise DataError(f"no *_image.json volumes in {directory}")
    return cases


def phantom_dataset(count: int, seed: int, schema: LabelSchema, extents: Sequence[int] = (32, 32, 32),
                    **kw) -> list[tuple[np.ndarray, np.ndarray]]:
    """``count`` phantoms with seeds ``seed, seed+1, ...``."""
    out = []
    for i in range(count):
        img, lab = generate_phantom(PhantomConfig(extents=list(extents), seed=seed + i, **kw), schema)
        out.append((img.data, lab.data))
    return out
