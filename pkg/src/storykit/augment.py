"""Training-set construction: synthesized backgrounds + centered copy-paste.

Scene sentences come from a plain text file (one per line); backgrounds are
rendered from them with the backend's vanilla sampler. Each augmented image
is a character alpha-composited onto the centre of a randomly selected
background. Placement is always central; no harmonization or blending is
attempted on purpose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import (
    CharacterTooLarge,
    EmptyCharacterDir,
    EmptySceneList,
    ValidationError,
)

DEFAULT_SCALE_RANGE = (0.4, 0.7)
MANIFEST_NAME = "manifest.json"


@dataclass
class CharacterImage:
    """RGBA image whose alpha channel is the character mask."""

    pixels: np.ndarray  # (h, w, 4) uint8
    source_path: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 4:
            raise ValidationError(
                f"character image {self.source_path or '<memory>'} must be RGBA"
            )
        if not (self.pixels[:, :, 3] > 0).any():
            raise ValidationError(
                f"character image {self.source_path or '<memory>'} is fully transparent"
            )


class SceneSource(Protocol):
    """Optional hook for a live text-generation service producing scene
    sentences. Nothing in the pipeline requires one; a plain text file is
    the default and keeps runs reproducible."""

    def generate_scenes(self, topic: str, count: int) -> List[str]: ...


@dataclass
class SceneDescriptionList:
    sentences: List[str]

    def __post_init__(self):
        self.sentences = [s.strip() for s in self.sentences if s.strip()]
        if not self.sentences:
            raise EmptySceneList("scene list is empty")

    @classmethod
    def from_file(cls, path) -> "SceneDescriptionList":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    @classmethod
    def from_source(cls, source: SceneSource, topic: str,
                    count: int) -> "SceneDescriptionList":
        return cls(source.generate_scenes(topic, count))


@dataclass
class BackgroundImage:
    pixels: np.ndarray  # (h, w, 3) uint8
    scene_index: int
    seed: int


@dataclass
class AugmentedImage:
    pixels: np.ndarray  # (h, w, 3) uint8
    character_index: int
    background_index: int
    scale: float
    seed: int


@dataclass
class TrainingDataset:
    """q = m + n images, all labeled with one class noun."""

    character_images: List[CharacterImage]
    augmented_images: List[AugmentedImage]
    label: str
    seed: int = 0
    scale_range: Tuple[float, float] = DEFAULT_SCALE_RANGE
    background_provenance: List[dict] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.character_images)

    @property
    def n(self) -> int:
        return len(self.augmented_images)

    def __len__(self) -> int:
        return self.m + self.n

    def training_images(self) -> List[np.ndarray]:
        """Character images first, augmented after; order is the dataset order."""
        return [c.pixels for c in self.character_images] + \
               [a.pixels for a in self.augmented_images]


def _derive_seed(master: int, index: int) -> int:
    return (master * 1_000_003 + index) & 0x7FFFFFFF


def generate_backgrounds(scenes: SceneDescriptionList, session, count: int,
                         seed: int, *, steps: int = 8,
                         guidance_scale: float = 7.5) -> List[BackgroundImage]:
    """Render ``count`` backgrounds, cycling through the scene sentences."""
    if count < 1:
        raise ValidationError(f"background count must be >= 1, got {count}")
    out = []
    for i in range(count):
        scene_index = i % len(scenes.sentences)
        bg_seed = _derive_seed(seed, i)
        img = session.sample(
            scenes.sentences[scene_index],
            steps=steps,
            guidance_scale=guidance_scale,
            seed=bg_seed,
        )
        out.append(BackgroundImage(pixels=img, scene_index=scene_index, seed=bg_seed))
    return out


def _content_bbox(alpha: np.ndarray) -> Tuple[int, int, int, int]:
    ys, xs = np.nonzero(alpha > 0)
    return ys.min(), xs.min(), ys.max() + 1, xs.max() + 1  # (top, left, bottom, right)


def copy_paste(character: CharacterImage, background: np.ndarray,
               scale_range: Tuple[float, float] = DEFAULT_SCALE_RANGE,
               seed: int = 0) -> AugmentedImage:
    """Alpha-composite the character onto the centre of the background.

    ``scale`` multiplies the character's native size and is the only sampled
    quantity; scale 1.0 pastes pixels untouched. The opaque content's
    bounding box is what gets centred.
    """
    rng = np.random.default_rng(seed)
    lo, hi = scale_range
    scale = float(rng.uniform(lo, hi))

    rgba = character.pixels
    if scale != 1.0:
        h = max(1, int(round(rgba.shape[0] * scale)))
        w = max(1, int(round(rgba.shape[1] * scale)))
        rgba = np.asarray(
            Image.fromarray(rgba).resize((w, h), Image.BILINEAR), dtype=np.uint8
        )
        if not (rgba[:, :, 3] > 0).any():
            raise ValidationError("character became fully transparent after scaling")

    bg_h, bg_w = background.shape[:2]
    top, left, bottom, right = _content_bbox(rgba[:, :, 3])
    box_h, box_w = bottom - top, right - left
    if box_h > bg_h or box_w > bg_w:
        raise CharacterTooLarge(
            f"scaled character {box_h}x{box_w} does not fit background {bg_h}x{bg_w}"
        )

    # place so the content bbox is centred on the background
    dst_top = (bg_h - box_h) // 2 - top
    dst_left = (bg_w - box_w) // 2 - left
    src_t, src_l = max(0, -dst_top), max(0, -dst_left)
    src_b = min(rgba.shape[0], bg_h - dst_top)
    src_r = min(rgba.shape[1], bg_w - dst_left)

    out = background.astype(np.float64).copy()
    patch = rgba[src_t:src_b, src_l:src_r].astype(np.float64)
    a = patch[:, :, 3:4] / 255.0
    region = (
        slice(dst_top + src_t, dst_top + src_b),
        slice(dst_left + src_l, dst_left + src_r),
    )
    out[region] = out[region] + a * (patch[:, :, :3] - out[region])
    composited = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return AugmentedImage(
        pixels=composited,
        character_index=-1,
        background_index=-1,
        scale=scale,
        seed=seed,
    )


def load_character_dir(char_dir) -> List[CharacterImage]:
    paths = sorted(
        p for p in Path(char_dir).iterdir()
        if p.suffix.lower() in (".png", ".webp", ".tif", ".tiff")
    )
    images = []
    for p in paths:
        arr = np.asarray(Image.open(p).convert("RGBA"), dtype=np.uint8)
        images.append(CharacterImage(pixels=arr, source_path=str(p)))
    if not images:
        raise EmptyCharacterDir(f"no RGBA images found in {char_dir}")
    return images


def build_training_set(char_dir, backgrounds: Sequence[BackgroundImage], n: int,
                       class_noun: str, seed: int,
                       scale_range: Tuple[float, float] = DEFAULT_SCALE_RANGE,
                       ) -> TrainingDataset:
    """Union of the character images with n centrally-pasted augmentations."""
    characters = load_character_dir(char_dir)
    if n < 0:
        raise ValidationError(f"n must be >= 0, got {n}")
    if n > 0 and not backgrounds:
        raise ValidationError("n > 0 requires at least one background")

    rng = np.random.default_rng(seed)
    augmented = []
    for i in range(n):
        ci = int(rng.integers(len(characters)))
        bi = int(rng.integers(len(backgrounds)))
        aug = copy_paste(
            characters[ci],
            backgrounds[bi].pixels,
            scale_range,
            seed=_derive_seed(seed, i),
        )
        aug.character_index = ci
        aug.background_index = bi
        augmented.append(aug)

    provenance = [
        {"scene_index": b.scene_index, "seed": b.seed} for b in backgrounds
    ]
    return TrainingDataset(
        character_images=characters,
        augmented_images=augmented,
        label=class_noun,
        seed=seed,
        scale_range=scale_range,
        background_provenance=provenance,
    )


def save_dataset(dataset: TrainingDataset, out_dir) -> Path:
    """Write images plus a manifest with paths, source indices, seeds, label."""
    out = Path(out_dir)
    (out / "characters").mkdir(parents=True, exist_ok=True)
    (out / "augmented").mkdir(parents=True, exist_ok=True)

    char_entries = []
    for i, c in enumerate(dataset.character_images):
        rel = f"characters/{i:04d}.png"
        Image.fromarray(c.pixels).save(out / rel)
        char_entries.append({"path": rel, "source_path": c.source_path})

    aug_entries = []
    for i, a in enumerate(dataset.augmented_images):
        rel = f"augmented/{i:04d}.png"
        Image.fromarray(a.pixels).save(out / rel)
        aug_entries.append({
            "path": rel,
            "character_index": a.character_index,
            "background_index": a.background_index,
            "scale": a.scale,
            "seed": a.seed,
        })

    manifest = {
        "label": dataset.label,
        "seed": dataset.seed,
        "scale_range": list(dataset.scale_range),
        "m": dataset.m,
        "n": dataset.n,
        "character_images": char_entries,
        "augmented_images": aug_entries,
        "backgrounds": dataset.background_provenance,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_dataset(dataset_dir, label_override: Optional[str] = None) -> TrainingDataset:
    root = Path(dataset_dir)
    manifest = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))
    characters = [
        CharacterImage(
            pixels=np.asarray(Image.open(root / e["path"]).convert("RGBA"), dtype=np.uint8),
            source_path=e.get("source_path", ""),
        )
        for e in manifest["character_images"]
    ]
    augmented = [
        AugmentedImage(
            pixels=np.asarray(Image.open(root / e["path"]).convert("RGB"), dtype=np.uint8),
            character_index=e["character_index"],
            background_index=e["background_index"],
            scale=e["scale"],
            seed=e["seed"],
        )
        for e in manifest["augmented_images"]
    ]
    return TrainingDataset(
        character_images=characters,
        augmented_images=augmented,
        label=label_override or manifest["label"],
        seed=manifest["seed"],
        scale_range=tuple(manifest["scale_range"]),
        background_provenance=manifest.get("backgrounds", []),
    )
