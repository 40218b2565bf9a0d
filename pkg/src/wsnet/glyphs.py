"""Single-stroke glyph outlines used by the synthetic handwriting renderer.

Coordinates are in em units with y pointing up: baseline at 0, x-height at
0.5, ascender at 1.0, descender at -0.35. Every glyph is an advance width
plus a list of polylines.
"""

from __future__ import annotations

import hashlib
import math

Point = tuple[float, float]
Polyline = list[Point]

X_HEIGHT = 0.5
ASCENDER = 1.0
DESCENDER = -0.35


def arc(cx: float, cy: float, rx: float, ry: float, a0: float, a1: float, n: int = 14) -> Polyline:
    """Points along an elliptic arc, angles in degrees, counter-clockwise from a0 to a1."""
    pts = []
    for i in range(n + 1):
        a = math.radians(a0 + (a1 - a0) * i / n)
        pts.append((cx + rx * math.cos(a), cy + ry * math.sin(a)))
    return pts


def _bowl(cx: float = 0.24, r: float = 0.22) -> Polyline:
    return arc(cx, 0.25, r, 0.25, 0, 360, 20)


_GLYPHS: dict[str, tuple[float, list[Polyline]]] = {
    " ": (0.35, []),
    "a": (0.52, [_bowl(), [(0.46, 0.5), (0.46, 0.0)]]),
    "b": (0.52, [[(0.04, 1.0), (0.04, 0.0)], arc(0.26, 0.25, 0.22, 0.25, 0, 360, 20)]),
    "c": (0.46, [arc(0.24, 0.25, 0.22, 0.25, 45, 315)]),
    "d": (0.52, [_bowl(), [(0.46, 1.0), (0.46, 0.0)]]),
    "e": (0.48, [[(0.03, 0.25), (0.45, 0.25)] + arc(0.24, 0.25, 0.21, 0.25, 0, 320)[1:]]),
    "f": (0.36, [arc(0.3, 0.82, 0.12, 0.14, 10, 180, 8) + [(0.18, 0.0)], [(0.04, 0.5), (0.34, 0.5)]]),
    "g": (0.52, [_bowl(), [(0.46, 0.5), (0.46, -0.2)] + arc(0.25, -0.2, 0.21, 0.15, 0, -170, 8)[1:]]),
    "h": (0.5, [[(0.04, 1.0), (0.04, 0.0)], [(0.04, 0.3)] + arc(0.24, 0.3, 0.2, 0.2, 180, 0, 10) + [(0.44, 0.0)]]),
    "i": (0.22, [[(0.1, 0.5), (0.1, 0.0)], [(0.1, 0.7), (0.1, 0.76)]]),
    "j": (0.28, [[(0.16, 0.5), (0.16, -0.2)] + arc(0.02, -0.2, 0.14, 0.15, 0, -150, 6)[1:], [(0.16, 0.7), (0.16, 0.76)]]),
    "k": (0.46, [[(0.04, 1.0), (0.04, 0.0)], [(0.4, 0.5), (0.04, 0.2), (0.42, 0.0)]]),
    "l": (0.2, [[(0.1, 1.0), (0.1, 0.0)]]),
    "m": (0.74, [[(0.04, 0.5), (0.04, 0.0)], [(0.04, 0.32)] + arc(0.19, 0.32, 0.15, 0.18, 180, 0, 8) + [(0.34, 0.0)],
                 [(0.34, 0.32)] + arc(0.52, 0.32, 0.18, 0.18, 180, 0, 8) + [(0.7, 0.0)]]),
    "n": (0.5, [[(0.04, 0.5), (0.04, 0.0)], [(0.04, 0.3)] + arc(0.24, 0.3, 0.2, 0.2, 180, 0, 10) + [(0.44, 0.0)]]),
    "o": (0.5, [arc(0.24, 0.25, 0.22, 0.25, 0, 360, 20)]),
    "p": (0.52, [[(0.04, 0.5), (0.04, -0.35)], arc(0.26, 0.25, 0.22, 0.25, 0, 360, 20)]),
    "q": (0.52, [_bowl(), [(0.46, 0.5), (0.46, -0.35), (0.54, -0.28)]]),
    "r": (0.38, [[(0.04, 0.5), (0.04, 0.0)], [(0.04, 0.28)] + arc(0.22, 0.28, 0.18, 0.2, 180, 45, 8)]),
    "s": (0.44, [arc(0.2, 0.37, 0.17, 0.13, 20, 270, 10) + arc(0.2, 0.12, 0.17, 0.12, 90, -160, 10)[1:]]),
    "t": (0.34, [[(0.14, 0.85), (0.14, 0.08)] + arc(0.24, 0.08, 0.1, 0.08, 180, 300, 5)[1:], [(0.02, 0.5), (0.3, 0.5)]]),
    "u": (0.5, [[(0.04, 0.5), (0.04, 0.2)] + arc(0.24, 0.2, 0.2, 0.2, 180, 360, 10)[1:], [(0.44, 0.5), (0.44, 0.0)]]),
    "v": (0.46, [[(0.02, 0.5), (0.22, 0.0), (0.42, 0.5)]]),
    "w": (0.68, [[(0.02, 0.5), (0.16, 0.0), (0.32, 0.42), (0.48, 0.0), (0.64, 0.5)]]),
    "x": (0.44, [[(0.03, 0.5), (0.41, 0.0)], [(0.41, 0.5), (0.03, 0.0)]]),
    "y": (0.46, [[(0.02, 0.5), (0.22, 0.05)], [(0.42, 0.5), (0.12, -0.35)]]),
    "z": (0.44, [[(0.04, 0.5), (0.4, 0.5), (0.04, 0.0), (0.42, 0.0)]]),
    "0": (0.52, [arc(0.25, 0.45, 0.22, 0.45, 0, 360, 24)]),
    "1": (0.3, [[(0.02, 0.78), (0.16, 0.92), (0.16, 0.0)], [(0.04, 0.0), (0.28, 0.0)]]),
    "5": (0.46, [[(0.4, 0.9), (0.08, 0.9), (0.06, 0.52)] + arc(0.2, 0.3, 0.2, 0.26, 120, -150, 12)]),
}

CHARSET: str = " abcdefghijklmnopqrstuvwxyz015"

# Confusable pairs; a writer may render either member with the other's shape.
AMBIGUOUS_PAIRS: tuple[tuple[str, str], ...] = (("u", "n"), ("a", "e"), ("l", "1"), ("o", "0"), ("s", "5"))


def glyph(ch: str) -> tuple[float, list[Polyline]]:
    return _GLYPHS[ch]


assert set(CHARSET) == set(_GLYPHS)


def charset_hash(charset: str = CHARSET) -> str:
    return hashlib.sha256(charset.encode("utf-8")).hexdigest()[:16]
