from __future__ import annotations

import csv

import numpy as np
import pytest

from storykit.errors import ValidationError
from storykit.evaluation import (
    HashEmbedder,
    export_human_eval_sheet,
    image_alignment,
    read_human_eval_sheet,
    text_alignment,
    write_scores_csv,
)


class FixtureEmbedder:
    """Maps text and images to preset unit vectors for exact-value tests."""

    def __init__(self, text_vec, image_vecs):
        self.text_vec = np.asarray(text_vec, dtype=np.float64)
        self.image_vecs = [np.asarray(v, dtype=np.float64) for v in image_vecs]
        self.calls = 0

    def embed_text(self, text):
        return self.text_vec

    def embed_image(self, image):
        vec = self.image_vecs[self.calls % len(self.image_vecs)]
        self.calls += 1
        return vec


E1 = [1.0, 0.0, 0.0]
E2 = [0.0, 1.0, 0.0]
IMG = np.zeros((4, 4, 3), dtype=np.uint8)


def test_text_alignment_identical_embeddings():
    embedder = FixtureEmbedder(E1, [E1])
    assert text_alignment([IMG], "prompt", embedder) == pytest.approx(1.0, abs=1e-9)


def test_text_alignment_orthogonal_embeddings():
    embedder = FixtureEmbedder(E1, [E2])
    assert text_alignment([IMG], "prompt", embedder) == pytest.approx(0.0, abs=1e-9)


def test_text_alignment_mixture():
    embedder = FixtureEmbedder(E1, [E1, E2])
    score = text_alignment([IMG, IMG], "prompt", embedder)
    assert score == pytest.approx(0.5, abs=1e-9)


def test_text_alignment_permutation_invariant():
    embedder = HashEmbedder()
    images = [np.full((4, 4, 3), v, dtype=np.uint8) for v in (0, 60, 120, 180)]
    a = text_alignment(images, "p", embedder)
    b = text_alignment(list(reversed(images)), "p", embedder)
    assert a == pytest.approx(b, abs=1e-12)


def test_image_alignment_single_character_identical():
    embedder = FixtureEmbedder(E1, [E1])
    score = image_alignment([IMG], {"a": [IMG]}, embedder)
    assert score == pytest.approx(1.0, abs=1e-9)


def test_image_alignment_two_characters_mean():
    # character a: ref == image (1.0); character b: orthogonal (0.0)
    class TwoCharEmbedder:
        def embed_text(self, text):
            return np.array(E1)

        def embed_image(self, image):
            return np.array(E1) if image[0, 0, 0] == 0 else np.array(E2)

    img_zero = np.zeros((2, 2, 3), dtype=np.uint8)
    img_one = np.ones((2, 2, 3), dtype=np.uint8)
    score = image_alignment([img_zero], {"a": [img_zero], "b": [img_one]},
                            TwoCharEmbedder())
    assert score == pytest.approx(0.5, abs=1e-9)


def test_image_alignment_matches_nested_mean_oracle():
    embedder = HashEmbedder(dim=32)
    rng = np.random.default_rng(5)
    images = [rng.integers(0, 256, (6, 6, 3), dtype=np.uint8) for _ in range(4)]
    refs = {
        "a": [rng.integers(0, 256, (6, 6, 3), dtype=np.uint8) for _ in range(3)],
        "b": [rng.integers(0, 256, (6, 6, 3), dtype=np.uint8) for _ in range(2)],
    }
    score = image_alignment(images, refs, embedder)
    # oracle: explicit double loop, then mean over characters
    per_char = []
    for name in refs:
        sims = []
        for r in refs[name]:
            for g in images:
                a = embedder.embed_image(r)
                b = embedder.embed_image(g)
                sims.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
        per_char.append(float(np.mean(sims)))
    assert score == pytest.approx(float(np.mean(per_char)), rel=1e-12)


def test_image_alignment_permutation_invariant():
    embedder = HashEmbedder(dim=16)
    rng = np.random.default_rng(6)
    images = [rng.integers(0, 256, (4, 4, 3), dtype=np.uint8) for _ in range(3)]
    refs = {"a": [rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)]}
    a = image_alignment(images, refs, embedder)
    b = image_alignment(images[::-1], refs, embedder)
    assert a == pytest.approx(b, abs=1e-12)


def test_hash_embedder_deterministic_unit_norm():
    embedder = HashEmbedder()
    v1 = embedder.embed_text("a girl")
    v2 = embedder.embed_text("a girl")
    assert np.array_equal(v1, v2)
    assert np.linalg.norm(v1) == pytest.approx(1.0, abs=1e-12)
    img = np.arange(48, dtype=np.uint8).reshape(4, 4, 3)
    assert np.array_equal(embedder.embed_image(img), embedder.embed_image(img))


def manifest_with(n):
    return {"frames": [{"image_path": f"frames/f{i}.png"} for i in range(n)]}


def test_sheet_seven_images_three_questions(tmp_path):
    path = tmp_path / "sheet.csv"
    rows = export_human_eval_sheet(manifest_with(7), path)
    assert rows == 21
    with open(path) as f:
        data = [r for r in csv.reader(f)]
    assert data[0][0].startswith("#")
    assert data[1] == ["image", "question", "score"]
    assert len(data) == 2 + 21
    assert all(r[2] == "" for r in data[2:])


def test_sheet_empty_manifest_header_only(tmp_path):
    path = tmp_path / "sheet.csv"
    rows = export_human_eval_sheet(manifest_with(0), path)
    assert rows == 0
    with open(path) as f:
        data = [r for r in csv.reader(f)]
    assert len(data) == 2


def write_filled_sheet(path, score):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["# scores range from 0 to 3"])
        writer.writerow(["image", "question", "score"])
        writer.writerow(["frames/f0.png", "quality?", score])


def test_sheet_score_range_validation(tmp_path):
    path = tmp_path / "sheet.csv"
    write_filled_sheet(path, "4")
    with pytest.raises(ValidationError):
        read_human_eval_sheet(path)
    write_filled_sheet(path, "-1")
    with pytest.raises(ValidationError):
        read_human_eval_sheet(path)
    write_filled_sheet(path, "two")
    with pytest.raises(ValidationError):
        read_human_eval_sheet(path)
    for good in ("0", "1", "2", "3"):
        write_filled_sheet(path, good)
        rows = read_human_eval_sheet(path)
        assert rows[0]["score"] == int(good)
    write_filled_sheet(path, "")  # blank rows stay unscored
    assert read_human_eval_sheet(path)[0]["score"] is None


def test_write_scores_csv(tmp_path):
    path = tmp_path / "scores.csv"
    write_scores_csv({"story 1": {"TA": 0.31, "IA": 0.7},
                      "story 2": {"TA": 0.33}}, path)
    with open(path) as f:
        data = list(csv.reader(f))
    assert data[0] == ["story", "IA", "TA"]
    assert data[1] == ["story 1", "0.7", "0.31"]
    assert data[2] == ["story 2", "", "0.33"]
