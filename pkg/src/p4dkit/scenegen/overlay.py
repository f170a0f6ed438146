"""Set-of-mark style overlays: a coloured box outline plus a 5x3 digit glyph per region."""

from __future__ import annotations

import numpy as np

GLYPH_H, GLYPH_W = 5, 3

_GLYPHS = {
    "0": ["111", "101", "101", "101", "111"],
    "1": ["010", "110", "010", "010", "111"],
    "2": ["111", "001", "111", "100", "111"],
    "3": ["111", "001", "111", "001", "111"],
    "4": ["101", "101", "111", "001", "001"],
    "5": ["111", "100", "111", "001", "111"],
    "6": ["111", "100", "111", "101", "111"],
    "7": ["111", "001", "010", "010", "010"],
    "8": ["111", "101", "111", "101", "111"],
    "9": ["111", "101", "111", "001", "111"],
}
GLYPHS = {d: np.array([[c == "1" for c in row] for row in rows]) for d, rows in _GLYPHS.items()}

REGION_COLORS = np.array(
    [
        [1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.5, 0.0], [0.5, 1.0, 0.0],
        [0.0, 0.5, 1.0], [1.0, 0.0, 0.5], [0.5, 0.0, 1.0], [0.0, 1.0, 0.5],
    ]
)
GLYPH_ON = np.array([1.0, 1.0, 1.0])


def region_number(token: str) -> int:
    digits = "".join(ch for ch in token if ch.isdigit())
    if not digits:
        raise ValueError(f"region token {token!r} carries no id")
    return int(digits)


def glyph_anchors(regions: dict[str, dict]) -> dict[str, tuple[int, int]]:
    """Top-left (row, col) of each region's glyph block. A block that would overlap an
    earlier one moves down by one glyph height until it is clear."""
    placed: list[tuple[int, int]] = []
    anchors = {}
    for token, reg in regions.items():
        x0, y0, _, _ = (int(v) for v in reg["box"])
        row, col = y0, x0
        while any(abs(row - r) < GLYPH_H and abs(col - c) < GLYPH_W for r, c in placed):
            row += GLYPH_H
        placed.append((row, col))
        anchors[token] = (row, col)
    return anchors


def overlay_regions(frame: np.ndarray, regions: dict[str, dict]) -> np.ndarray:
    """Return a copy of ``frame`` (H, W, 3) with outlines and id glyphs drawn; pixels outside
    the overlays are untouched."""
    out = np.array(frame, copy=True)
    if not regions:
        return out
    H, W = out.shape[:2]
    for token, reg in regions.items():
        x0, y0, x1, y1 = (int(v) for v in reg["box"])
        if not (0 <= x0 <= x1 < W and 0 <= y0 <= y1 < H):
            raise ValueError(f"region {token} box {reg['box']} outside a {H}x{W} frame")
        color = REGION_COLORS[(region_number(token) - 1) % len(REGION_COLORS)]
        out[y0, x0:x1 + 1] = color
        out[y1, x0:x1 + 1] = color
        out[y0:y1 + 1, x0] = color
        out[y0:y1 + 1, x1] = color
    for token, (row, col) in glyph_anchors(regions).items():
        color = REGION_COLORS[(region_number(token) - 1) % len(REGION_COLORS)]
        glyph = GLYPHS[str(region_number(token) % 10)]
        for r in range(GLYPH_H):
            for c in range(GLYPH_W):
                rr, cc = row + r, col + c
                if 0 <= rr < H and 0 <= cc < W:
                    out[rr, cc] = GLYPH_ON if glyph[r, c] else color
    return out


def overlay_pixels(frame_shape: tuple[int, int], regions: dict[str, dict]) -> np.ndarray:
    """Boolean map of the pixels ``overlay_regions`` writes."""
    H, W = frame_shape
    touched = np.zeros((H, W), dtype=bool)
    for reg in regions.values():
        x0, y0, x1, y1 = (int(v) for v in reg["box"])
        touched[y0, x0:x1 + 1] = touched[y1, x0:x1 + 1] = True
        touched[y0:y1 + 1, x0] = touched[y0:y1 + 1, x1] = True
    for row, col in glyph_anchors(regions).values():
        touched[max(row, 0):min(row + GLYPH_H, H), max(col, 0):min(col + GLYPH_W, W)] = True
    return touched
