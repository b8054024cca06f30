"""Toy street-scene generator ("toyscapes") and a paired PNG dataset loader.

Each scene is a layered layout (sky / buildings / vegetation / sidewalk /
road) with a few foreground primitives (pole, car, person).  The mask is
exact; the RGB image is the class layout painted with per-class appearance
colors plus bounded texture noise, so the RGB -> semantic mapping stays
learnable at desk scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "SceneSpec",
    "DatasetHandle",
    "DatasetError",
    "generate_scene",
    "generate_dataset",
    "load_paired_dataset",
    "load_png",
    "save_png",
    "TOY_CLASS_NAMES",
]

TOY_CLASS_NAMES = ("sky", "road", "sidewalk", "building", "vegetation", "pole", "car", "person")

# class id -> (appearance RGB, texture amplitude)
TOY_APPEARANCE = {
    0: ((135, 206, 235), 5),
    1: ((90, 90, 95), 8),
    2: ((185, 180, 170), 8),
    3: ((150, 110, 90), 12),
    4: ((60, 130, 60), 14),
    5: ((235, 200, 70), 5),
    6: ((30, 60, 190), 6),
    7: ((210, 60, 75), 6),
}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 8
    texture_scale: float = 1.0
    seed: int = 0


@dataclass
class DatasetHandle:
    split: str
    count: int
    _get: object = field(repr=False)

    def __len__(self):
        return self.count

    def get(self, index: int):
        """Returns (image uint8 HxWx3, mask uint8 HxW)."""
        if not 0 <= index < self.count:
            raise IndexError(index)
        return self._get(index)


_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


def _scene_rng(spec: SceneSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(_SPLIT_IDS[split], index))
    )


def generate_scene(spec: SceneSpec, index: int, split: str = "train"):
    """Deterministic in (spec.seed, split, index)."""
    rng = _scene_rng(spec, split, index)
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=np.uint8)  # sky

    horizon = int(rng.integers(h * 5 // 16, h * 9 // 16))
    side_h = int(rng.integers(h // 16 + 2, h // 8 + 3))
    road_top = horizon + side_h

    mask[horizon:road_top, :] = 2  # sidewalk
    mask[road_top:, :] = 1  # road

    # buildings: rectangles rising from the horizon into the sky
    for _ in range(int(rng.integers(1, 4))):
        bw = int(rng.integers(w // 6, w // 2))
        bh = int(rng.integers(h // 6, horizon))
        bx = int(rng.integers(0, max(1, w - bw)))
        mask[max(0, horizon - bh) : horizon, bx : bx + bw] = 3

    # vegetation: discs straddling the horizon
    if rng.random() < 0.85:
        for _ in range(int(rng.integers(1, 3))):
            r = int(rng.integers(4, max(5, h // 8)))
            cy = int(rng.integers(max(r, horizon - h // 6), horizon + 2))
            cx = int(rng.integers(0, w))
            yy, xx = np.ogrid[:h, :w]
            mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 4

    # car: rectangle on the road with a cabin bump
    if rng.random() < 0.9:
        cw = int(rng.integers(w // 6, w // 4 + 2))
        ch = int(rng.integers(h // 10, h // 7 + 1))
        cx = int(rng.integers(0, max(1, w - cw)))
        cy = int(rng.integers(road_top, max(road_top + 1, h - ch)))
        mask[cy : cy + ch, cx : cx + cw] = 6
        cab = max(2, ch // 2)
        mask[max(road_top, cy - cab) : cy, cx + cw // 4 : cx + 3 * cw // 4] = 6

    # person: small upright rectangle on the sidewalk
    if rng.random() < 0.75:
        pw = int(rng.integers(3, 5))
        ph = int(rng.integers(h // 8, h // 5))
        px = int(rng.integers(0, max(1, w - pw)))
        ptop = max(0, road_top - ph)
        mask[ptop:road_top, px : px + pw] = 7

    # pole: thin vertical bar from the sidewalk up into the sky
    if rng.random() < 0.75:
        pw = 2 if w <= 96 else 3
        ph = int(rng.integers(h // 3, h * 2 // 3))
        px = int(rng.integers(0, w - pw))
        pbot = int(rng.integers(horizon, road_top + 1))
        mask[max(0, pbot - ph) : pbot, px : px + pw] = 5

    img = np.zeros((h, w, 3), dtype=np.float64)
    for cls, (color, amp) in TOY_APPEARANCE.items():
        sel = mask == cls
        if not sel.any():
            continue
        noise = rng.uniform(-amp, amp, size=(int(sel.sum()), 3)) * spec.texture_scale
        img[sel] = np.asarray(color, dtype=np.float64) + noise
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, mask


def toy_dataset(spec: SceneSpec, split: str, count: int) -> DatasetHandle:
    return DatasetHandle(split=split, count=count, _get=lambda i: generate_scene(spec, i, split))


def save_png(arr: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path))


def generate_dataset(root, spec: SceneSpec, counts: dict[str, int], force: bool = False) -> dict:
    """Write `<root>/<split>/{img,mask}/NNNN.png` plus a provenance manifest."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DatasetError(f"{root} exists and is not empty (use force to overwrite)")
    digest = hashlib.sha256()
    for split, count in counts.items():
        for i in range(count):
            img, mask = generate_scene(spec, i, split)
            save_png(img, root / split / "img" / f"{i:04d}.png")
            save_png(mask, root / split / "mask" / f"{i:04d}.png")
            digest.update(img.tobytes())
            digest.update(mask.tobytes())
    manifest = {
        "spec": {
            "height": spec.height,
            "width": spec.width,
            "num_classes": spec.num_classes,
            "texture_scale": spec.texture_scale,
            "seed": spec.seed,
        },
        "counts": counts,
        "sha256": digest.hexdigest(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_paired_dataset(image_dir, mask_dir, split: str = "train") -> DatasetHandle:
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    imgs = {p.stem: p for p in sorted(image_dir.glob("*.png"))}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))}
    if not imgs:
        raise DatasetError(f"no PNG images in {image_dir}")
    missing = sorted(set(imgs) ^ set(masks))
    if missing:
        raise DatasetError(f"unmatched basenames between {image_dir} and {mask_dir}: {missing}")
    names = sorted(imgs)

    def get(i):
        img = load_png(imgs[names[i]])
        mask = load_png(masks[names[i]])
        if mask.ndim != 2:
            raise DatasetError(f"mask {masks[names[i]]} must be single-channel, got shape {mask.shape}")
        return img, mask

    return DatasetHandle(split=split, count=len(names), _get=get)
