"""The shared 12-word color vocabulary with fixed RGB anchors."""

import numpy as np

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.80, 0.15, 0.12),
    "orange": (0.93, 0.52, 0.10),
    "yellow": (0.93, 0.85, 0.20),
    "olive": (0.50, 0.50, 0.15),
    "green": (0.22, 0.60, 0.22),
    "teal": (0.10, 0.50, 0.50),
    "blue": (0.18, 0.32, 0.80),
    "purple": (0.50, 0.22, 0.62),
    "pink": (0.92, 0.55, 0.70),
    "brown": (0.50, 0.32, 0.16),
    "gray": (0.50, 0.50, 0.50),
    "white": (0.92, 0.92, 0.90),
}
COLOR_NAMES = tuple(COLORS)


def rgb(name: str) -> np.ndarray:
    return np.asarray(COLORS[name], dtype=np.float64)


def nearest_color(value) -> str:
    v = np.asarray(value, dtype=np.float64)
    return min(COLOR_NAMES, key=lambda n: float(((rgb(n) - v) ** 2).sum()))


def color_word(attribute: str) -> str | None:
    """First hyphen-separated part of an attribute that is a color word."""
    for part in attribute.lower().replace("_", "-").split("-"):
        if part in COLORS:
            return part
    return None
