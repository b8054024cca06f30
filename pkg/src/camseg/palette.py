"""Class-index masks <-> RGB semantic images.

The forward direction paints each class with a fixed palette color; the
inverse is a non-parametric nearest-neighbor search over palette entries, so
it tolerates the continuous-valued decoder output after 8-bit quantization.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

IGNORE_LABEL = 255

__all__ = [
    "Palette",
    "CodecError",
    "PaletteFormatError",
    "IGNORE_LABEL",
    "colorize",
    "declassify",
    "load_palette",
    "save_palette",
    "bundled_palette_path",
]


class CodecError(ValueError):
    pass


class PaletteFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Palette:
    entries: np.ndarray  # (K, 3) uint8
    names: tuple[str, ...]

    def __post_init__(self):
        ent = np.asarray(self.entries, dtype=np.uint8)
        if ent.ndim != 2 or ent.shape[1] != 3 or ent.shape[0] < 2:
            raise PaletteFormatError(f"palette must be (K>=2, 3), got {ent.shape}")
        if len({tuple(row) for row in ent.tolist()}) != len(ent):
            raise PaletteFormatError("palette contains duplicate RGB triples")
        if len(self.names) != len(ent):
            raise PaletteFormatError("palette names/entries length mismatch")
        object.__setattr__(self, "entries", ent)

    @property
    def num_classes(self) -> int:
        return self.entries.shape[0]


def colorize(mask: np.ndarray, palette: Palette) -> np.ndarray:
    """Map an (H, W) class-index mask to an (H, W, 3) uint8 semantic image.

    Ignore-label pixels come out black.
    """
    mask = np.asarray(mask)
    k = palette.num_classes
    bad = (mask >= k) & (mask != IGNORE_LABEL)
    if bad.any():
        pos = np.argwhere(bad)[0]
        raise CodecError(
            f"label {int(mask[tuple(pos)])} at {tuple(int(v) for v in pos)} "
            f"exceeds palette size {k}"
        )
    table = np.zeros((256, 3), dtype=np.uint8)
    table[:k] = palette.entries
    return table[mask]


def declassify(image: np.ndarray, palette: Palette) -> np.ndarray:
    """Nearest palette entry per pixel (squared RGB distance, lowest index wins ties)."""
    img = np.asarray(image, dtype=np.int32)
    entries = palette.entries.astype(np.int32)  # (K, 3)
    # (H, W, K) distances
    d = ((img[..., None, :] - entries[None, None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=-1).astype(np.uint8)


def load_palette(path) -> Palette:
    """Parse a palette file: one `index name r g b` line per class."""
    path = Path(path)
    rows: dict[int, tuple[str, tuple[int, int, int]]] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise PaletteFormatError(f"{path}:{lineno}: expected 'index name r g b', got {raw!r}")
        try:
            idx = int(parts[0])
            rgb = tuple(int(v) for v in parts[2:5])
        except ValueError as e:
            raise PaletteFormatError(f"{path}:{lineno}: {e}") from None
        if not all(0 <= v <= 255 for v in rgb):
            raise PaletteFormatError(f"{path}:{lineno}: RGB values must be 0..255")
        if idx in rows:
            raise PaletteFormatError(f"{path}:{lineno}: duplicate class index {idx}")
        rows[idx] = (parts[1], rgb)
    if sorted(rows) != list(range(len(rows))):
        raise PaletteFormatError(f"{path}: class indices must be contiguous from 0")
    names = tuple(rows[i][0] for i in range(len(rows)))
    entries = np.array([rows[i][1] for i in range(len(rows))], dtype=np.uint8)
    return Palette(entries=entries, names=names)


def save_palette(palette: Palette, path) -> None:
    lines = [
        f"{i} {name} {r} {g} {b}"
        for i, (name, (r, g, b)) in enumerate(zip(palette.names, palette.entries.tolist()))
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def bundled_palette_path(name: str) -> Path:
    """Path of a palette shipped with the package (cityscapes, high_contrast, toyscapes)."""
    p = resources.files("camseg") / "palettes" / f"{name}.txt"
    if not p.is_file():
        raise FileNotFoundError(f"no bundled palette named {name!r}")
    return Path(str(p))
