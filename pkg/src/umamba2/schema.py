"""Label schema: class table with laterality partners, related classes and loss weights."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

TINY_WEIGHT = 10.0


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    laterality_partner: int | None = None
    related: tuple[int, ...] = ()
    tiny: bool = False


@dataclass
class LabelSchema:
    classes: list[ClassInfo]
    loss_weights: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.loss_weights is None:
            self.loss_weights = np.array([TINY_WEIGHT if c.tiny else 1.0 for c in self.classes])
        self.loss_weights = np.asarray(self.loss_weights, dtype=np.float64)
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def validate(self) -> None:
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise SchemaError(f"class ids must be 0..K-1 in order, got {ids}")
        known = set(ids)
        for c in self.classes:
            p = c.laterality_partner
            if p is not None:
                if p not in known:
                    raise SchemaError(f"class {c.id} ({c.name}): unknown partner {p}")
                if p == c.id:
                    raise SchemaError(f"class {c.id} ({c.name}) is its own laterality partner")
                back = self.classes[p].laterality_partner
                if back != c.id:
                    raise SchemaError(f"asymmetric laterality: partner({c.id})={p} but partner({p})={back}")
            for r in c.related:
                if r not in known:
                    raise SchemaError(f"class {c.id} ({c.name}): unknown related id {r}")
                if r == c.id:
                    raise SchemaError(f"class {c.id} ({c.name}) lists itself as related")
        if self.loss_weights.shape != (len(ids),) or np.any(self.loss_weights <= 0):
            raise SchemaError("loss weights must be one positive value per class")

    def partner_map(self) -> np.ndarray:
        """Permutation of class ids: k -> partner(k), or k itself when unpaired."""
        return np.array([c.laterality_partner if c.laterality_partner is not None else c.id
                         for c in self.classes], dtype=np.int64)

    def has_partners(self) -> bool:
        return any(c.laterality_partner is not None for c in self.classes)

    def related(self, k: int) -> tuple[int, ...]:
        return self.classes[k].related

    def tiny_ids(self) -> list[int]:
        return [c.id for c in self.classes if c.tiny]

    def ids_named(self, *fragments: str) -> list[int]:
        return [c.id for c in self.classes if any(f in c.name for f in fragments)]

    def to_dict(self) -> dict:
        return {
            "classes": [{"id": c.id, "name": c.name, "laterality_partner": c.laterality_partner,
                         "related": list(c.related), "tiny": c.tiny} for c in self.classes],
            "loss_weights": self.loss_weights.tolist(),
        }


def schema_from_dict(d: dict) -> LabelSchema:
    try:
        classes = [ClassInfo(int(c["id"]), str(c["name"]), c.get("laterality_partner"),
                             tuple(int(r) for r in c.get("related", ())), bool(c.get("tiny", False)))
                   for c in d["classes"]]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed schema: {exc}") from exc
    return LabelSchema(classes, d.get("loss_weights"))


def load_schema(path: str | Path | None = None) -> LabelSchema:
    """Load and validate a schema file; ``None`` gives the bundled 12-class dental schema."""
    if path is None:
        text = resources.files("umamba2").joinpath("data/dental_schema.json").read_text()
    else:
        text = Path(path).read_text()
    return schema_from_dict(json.loads(text))
