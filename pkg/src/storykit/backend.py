"""Backend abstraction: descriptor, encoder states, noise prediction.

Every other module computes against this surface. A backend supplies a
tokenizer, a text encoder (frozen + trainable copies), a noise predictor
with a pre-softmax cross-attention hook, and a latent decoder. The bundled
toy backend (see :mod:`storykit.toy`) runs all of it at CPU speed; a real
latent-diffusion stack can be slotted in by registering another encoder
forward under its ``backend_id``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import torch

from .errors import DescriptorMismatch, ShapeMismatch

# editor(scores, layer=i, side=s) -> edited scores; applied strictly before softmax
AttentionEditor = Callable[..., torch.Tensor]


@dataclass(frozen=True)
class BackendDescriptor:
    """Static shape contract of a backend."""

    backend_id: str
    L: int                      # max token-sequence length
    H: int                      # embedding width
    latent_side: int            # spatial side of the latent grid
    attention_sides: List[int]  # spatial side of each cross-attention layer
    token_ids: Dict[str, int]   # bos / eos / pad

    def __post_init__(self):
        if self.L < 4:
            raise ValueError(f"L must be >= 4, got {self.L}")
        if self.H < 1:
            raise ValueError(f"H must be >= 1, got {self.H}")
        if self.latent_side < 1:
            raise ValueError("latent_side must be positive")
        for side in self.attention_sides:
            if side <= 0 or self.latent_side % side != 0:
                raise ValueError(
                    f"attention side {side} must divide latent_side {self.latent_side}"
                )
        ids = [self.token_ids[k] for k in ("bos", "eos", "pad")]
        if len(set(ids)) != 3:
            raise ValueError(f"bos/eos/pad ids must be pairwise distinct, got {ids}")

    @property
    def bos(self) -> int:
        return self.token_ids["bos"]

    @property
    def eos(self) -> int:
        return self.token_ids["eos"]

    @property
    def pad(self) -> int:
        return self.token_ids["pad"]

    @property
    def plugin_rows(self) -> int:
        # one row per content position the character token can occupy
        return self.L - 2


@dataclass
class EncoderState:
    """Parameter snapshot of a text encoder.

    ``frozen`` states are never mutated by training; encoding is a pure
    function of (parameters, token sequence).
    """

    kind: str  # "frozen" | "finetuned"
    parameters: Dict[str, torch.Tensor]
    descriptor: BackendDescriptor

    def clone(self, kind: Optional[str] = None) -> "EncoderState":
        return EncoderState(
            kind=kind or self.kind,
            parameters={k: v.detach().clone() for k, v in self.parameters.items()},
            descriptor=self.descriptor,
        )


@dataclass
class NoisePrediction:
    """Predicted noise plus the post-softmax cross-attention maps.

    ``cross_attention_maps[i]`` has shape (side_i * side_i, L) where
    ``side_i == descriptor.attention_sides[i]``. Editors registered with
    :func:`predict_noise` see the pre-softmax scores; the maps stored here
    are what the predictor actually consumed (edits included).
    """

    predicted_noise: torch.Tensor
    cross_attention_maps: List[torch.Tensor] = field(default_factory=list)


@dataclass(frozen=True)
class TokenizedText:
    """Token ids padded to exactly L, plus where each input word landed."""

    ids: List[int]
    words: List[str]
    word_positions: List[int]  # position of words[i] in ids (bos is position 0)


# Registered encoder forwards, keyed by backend_id. The toy backend registers
# itself on import; a real adapter registers its own forward here.
_ENCODER_FORWARDS: Dict[str, Callable] = {}


def register_encoder_forward(backend_id: str, forward: Callable) -> None:
    _ENCODER_FORWARDS[backend_id] = forward


def encoder_forward(descriptor: BackendDescriptor) -> Callable:
    if descriptor.backend_id not in _ENCODER_FORWARDS:
        raise KeyError(f"no encoder forward registered for {descriptor.backend_id!r}")
    return _ENCODER_FORWARDS[descriptor.backend_id]


def tokenize(session, text: str) -> TokenizedText:
    """Tokenize ``text`` to exactly L ids: bos, content, eos, pads."""
    return session.tokenizer.tokenize(text)


def encode_tokens(state: EncoderState, tokens: Sequence[int]) -> torch.Tensor:
    """Contextual embeddings (L, H) of a full-length token sequence."""
    L = state.descriptor.L
    if len(tokens) != L:
        raise ShapeMismatch(f"expected {L} tokens, got {len(tokens)}")
    forward = _ENCODER_FORWARDS[state.descriptor.backend_id]
    return forward(state.parameters, list(tokens), state.descriptor)


def predict_noise(
    session,
    latent: torch.Tensor,
    embeddings: torch.Tensor,
    t: int,
    attention_editor: Optional[AttentionEditor] = None,
) -> NoisePrediction:
    """Run the noise predictor once at diffusion timestep ``t``.

    If ``attention_editor`` is given it is invoked on every cross-attention
    score tensor before softmax and the edited scores are the ones consumed
    downstream.
    """
    return session.predict_noise(latent, embeddings, t, attention_editor)


def decode_latent(session, latent: torch.Tensor):
    """Deterministic latent -> RGB uint8 image."""
    return session.decode_latent(latent)


def check_same_descriptor(a: BackendDescriptor, b: BackendDescriptor) -> None:
    if a.backend_id != b.backend_id or a.L != b.L or a.H != b.H:
        raise DescriptorMismatch(
            f"descriptor mismatch: {a.backend_id}(L={a.L},H={a.H}) vs "
            f"{b.backend_id}(L={b.L},H={b.H})"
        )


# Adapter slot for a real latent-diffusion stack (interface only; the shapes
# match Stable Diffusion v2.1). Constructing a session for it requires the
# actual model weights and is intentionally not implemented here.
REAL_BACKEND_DESCRIPTOR = BackendDescriptor(
    backend_id="sd21-adapter",
    L=77,
    H=1024,
    latent_side=64,
    attention_sides=[64, 32, 16, 8],
    token_ids={"bos": 49406, "eos": 49407, "pad": 0},
)
