"""Alignment metrics and human-evaluation sheets.

Text alignment scores how well images match the prompt; image alignment
scores how well they match per-character reference images. Both are plain
cosine-similarity means over an abstract embedder, so any unit-norm
text/image scorer can be plugged in. The bundled hash embedder is a
deterministic stand-in for tests and offline runs; absolute values are only
comparable within one embedder.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from typing import Dict, List, Protocol, Sequence

import numpy as np

from .errors import ValidationError

HUMAN_EVAL_QUESTIONS = (
    "Does the produced image precisely represent the input prompt?",
    "Is the character in the produced image consistent with the target character?",
    "What is the quality of the produced image?",
)
SCORE_MIN, SCORE_MAX = 0, 3


class Embedder(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValidationError("embedder produced a zero vector")
    return v / norm


@dataclass
class HashEmbedder:
    """Deterministic stand-in scorer: content-seeded unit gaussian vectors."""

    dim: int = 64

    def _from_bytes(self, data: bytes) -> np.ndarray:
        seed = int.from_bytes(
            hashlib.blake2b(data, digest_size=8).digest(), "big"
        ) % (2 ** 32)
        rng = np.random.default_rng(seed)
        return _unit(rng.standard_normal(self.dim))

    def embed_text(self, text: str) -> np.ndarray:
        return self._from_bytes(b"text:" + text.encode("utf-8"))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self._from_bytes(b"image:" + np.ascontiguousarray(image).tobytes())


def text_alignment(images: Sequence[np.ndarray], prompt: str,
                   embedder: Embedder) -> float:
    """Mean cosine similarity between the prompt and each image."""
    if not images:
        raise ValidationError("text_alignment needs at least one image")
    p = _unit(embedder.embed_text(prompt))
    sims = [float(p @ _unit(embedder.embed_image(img))) for img in images]
    return float(np.mean(sims))


def image_alignment(images: Sequence[np.ndarray],
                    character_refs: Dict[str, Sequence[np.ndarray]],
                    embedder: Embedder) -> float:
    """Per character: mean cosine over (reference, image) pairs; then the
    mean over characters."""
    if not images:
        raise ValidationError("image_alignment needs at least one image")
    if not character_refs:
        raise ValidationError("image_alignment needs at least one character")
    image_embs = [_unit(embedder.embed_image(img)) for img in images]
    per_character = []
    for name, refs in character_refs.items():
        if not refs:
            raise ValidationError(f"character {name!r} has no reference images")
        ref_embs = [_unit(embedder.embed_image(r)) for r in refs]
        sims = [float(r @ g) for r in ref_embs for g in image_embs]
        per_character.append(float(np.mean(sims)))
    return float(np.mean(per_character))


def export_human_eval_sheet(manifest: dict, path,
                            questions: Sequence[str] = HUMAN_EVAL_QUESTIONS) -> int:
    """One blank-score row per (image, question); returns the row count."""
    frames = manifest.get("frames", [])
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"# scores range from {SCORE_MIN} to {SCORE_MAX}"])
        writer.writerow(["image", "question", "score"])
        for frame in frames:
            for q in questions:
                writer.writerow([frame["image_path"], q, ""])
    return len(frames) * len(questions)


def read_human_eval_sheet(path) -> List[dict]:
    """Load a filled sheet; scores must be blank or integers in range."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for row in reader:
            if not row or row[0].startswith("#") or row[0] == "image":
                continue
            image, question, raw = row[0], row[1], row[2].strip()
            score = None
            if raw:
                try:
                    score = int(raw)
                except ValueError:
                    raise ValidationError(f"score {raw!r} for {image} is not an integer")
                if not SCORE_MIN <= score <= SCORE_MAX:
                    raise ValidationError(
                        f"score {score} for {image} outside {SCORE_MIN}..{SCORE_MAX}"
                    )
            rows.append({"image": image, "question": question, "score": score})
    return rows


def write_scores_csv(scores: Dict[str, Dict[str, float]], path) -> None:
    """Story-by-metric table (TA/IA per story name)."""
    metrics = sorted({m for row in scores.values() for m in row})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["story"] + metrics)
        for story in sorted(scores):
            writer.writerow([story] + [scores[story].get(m, "") for m in metrics])
