from __future__ import annotations

import numpy as np
import pytest
import torch

from storykit.backend import NoisePrediction
from storykit.extraction import extract_character_plugin
from storykit.toy import ToySession, create_toy_session


@pytest.fixture(scope="session")
def session() -> ToySession:
    return create_toy_session(seed=0)


@pytest.fixture(scope="session")
def small_session() -> ToySession:
    return create_toy_session(seed=0, L=6)


@pytest.fixture(scope="session")
def girl_plugin(session):
    return extract_character_plugin(
        session, session.frozen_encoder, name="lily", class_noun="girl"
    )


@pytest.fixture(scope="session")
def boy_plugin(session):
    return extract_character_plugin(
        session, session.frozen_encoder, name="tom", class_noun="boy"
    )


@pytest.fixture(scope="session")
def dog_plugin(session):
    return extract_character_plugin(
        session, session.frozen_encoder, name="rex", class_noun="dog"
    )


class PredictOverride:
    """Session wrapper whose noise predictor is replaced by a test function."""

    def __init__(self, base, fn):
        self._base = base
        self._fn = fn

    def predict_noise(self, latent, embeddings, t, attention_editor=None):
        return NoisePrediction(predicted_noise=self._fn(latent, embeddings, t))

    def __getattr__(self, name):
        return getattr(self._base, name)


@pytest.fixture
def predict_override():
    return PredictOverride


def make_character_image(size: int = 24, seed: int = 0,
                         opaque: bool = True) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rgba = rng.integers(0, 256, size=(size, size, 4), dtype=np.uint8)
    rgba[:, :, 3] = 255 if opaque else 0
    return rgba


def make_background(size: int = 64, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def softmax_rows_oracle(scores: np.ndarray) -> np.ndarray:
    """Independent row-wise softmax (stabilized, plain numpy)."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def write_character_dir(tmp_path, count: int = 3, size: int = 24):
    from PIL import Image

    char_dir = tmp_path / "chars"
    char_dir.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        Image.fromarray(make_character_image(size=size, seed=i)).save(
            char_dir / f"char_{i}.png"
        )
    return char_dir


def write_scene_file(tmp_path, sentences=None):
    scenes = tmp_path / "scenes.txt"
    scenes.write_text(
        "\n".join(sentences or [
            "a quiet forest clearing",
            "a sunny beach",
            "a snowy mountain pass",
            "a busy city street",
            "a calm lake at dawn",
        ]),
        encoding="utf-8",
    )
    return scenes


def finite_difference(loss_fn, params: dict, name: str, index: tuple,
                      h: float = 1e-6) -> float:
    """Central finite difference of ``loss_fn(params)`` in one coordinate."""
    with torch.no_grad():
        original = params[name][index].item()
        params[name][index] = original + h
        plus = float(loss_fn(params))
        params[name][index] = original - h
        minus = float(loss_fn(params))
        params[name][index] = original
    return (plus - minus) / (2.0 * h)
