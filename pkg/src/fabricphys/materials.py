"""Fabric material table and the three-parameter search space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# kg/m^2; the source table prints the unit as m/s^2, which is a typo for area weight.
AREA_WEIGHT_RANGES = {
    "white_tablecloth": (0.10, 0.17),
    "gray_interlock": (0.15, 0.22),
    "black_denim": (0.30, 0.37),
    "sparkle_fleece": (0.23, 0.30),
    "pink_nylon": (0.16, 0.23),
    "ponte_roma": (0.23, 0.30),
    "red_violet": (0.10, 0.17),
}

STIFFNESS_SCALE_RANGE = (0.1, 10.0)
WIND_SPEED_RANGE = (1.0, 6.0)
REFERENCE_BEND_STIFFNESS = 1e-5  # N*m, every entry of the default 3x5 matrix

PARAM_NAMES = ("stiffness_scale", "wind_speed", "area_weight")


@dataclass(frozen=True)
class Material:
    name: str
    area_weight_range: tuple[float, float]
    bend_matrix: tuple[tuple[float, ...], ...]

    def bend_array(self) -> np.ndarray:
        return np.asarray(self.bend_matrix, dtype=float)


def default_bend_matrix(value: float = REFERENCE_BEND_STIFFNESS):
    return tuple(tuple(float(value) for _ in range(5)) for _ in range(3))


def validate_bend_matrix(matrix) -> tuple[tuple[float, ...], ...]:
    arr = np.asarray(matrix, dtype=float)
    if arr.shape != (3, 5):
        raise ConfigError(f"bend matrix must be 3x5, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ConfigError("bend matrix entries must be finite and non-negative")
    return tuple(tuple(float(v) for v in row) for row in arr)


def material_table(overrides: dict | None = None) -> dict[str, Material]:
    """Build the material table, optionally overridden from a config mapping.

    ``overrides`` maps material name to ``{"area_weight_range": [lo, hi],
    "bend_matrix": [[...] * 5] * 3}``; unknown names add new materials.
    """
    table = {
        name: Material(name, rng, default_bend_matrix())
        for name, rng in AREA_WEIGHT_RANGES.items()
    }
    for name, spec in (overrides or {}).items():
        base = table.get(name)
        rng = spec.get("area_weight_range", base.area_weight_range if base else None)
        if rng is None:
            raise ConfigError(f"material {name!r} needs an area_weight_range")
        lo, hi = float(rng[0]), float(rng[1])
        if not (0 < lo < hi):
            raise ConfigError(f"material {name!r}: area weight range must satisfy 0 < lo < hi")
        bend = spec.get("bend_matrix")
        bend = validate_bend_matrix(bend) if bend is not None else (
            base.bend_matrix if base else default_bend_matrix())
        table[name] = Material(name, (lo, hi), bend)
    return table


def get_material(name: str, table: dict[str, Material] | None = None) -> Material:
    table = material_table() if table is None else table
    try:
        return table[name]
    except KeyError:
        raise ConfigError(
            f"unknown material {name!r}; known: {', '.join(sorted(table))}") from None


def search_bounds(material: Material) -> np.ndarray:
    """(3, 2) array of physical [lo, hi] per parameter, in PARAM_NAMES order."""
    return np.array([STIFFNESS_SCALE_RANGE, WIND_SPEED_RANGE, material.area_weight_range],
                    dtype=float)
