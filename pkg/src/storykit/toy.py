"""Deterministic toy backend.

Text encoder = embedding table + 2 self-attention blocks (H=32, L=16).
Noise predictor = 2 cross-attention blocks over an 8x8 latent grid. All
weights come from a seeded generator and everything runs in float64, so
analytic gradients can be checked against finite differences and repeated
runs are bit-identical. The predictor is frozen by construction; only text
encoder parameters ever train.
"""

from __future__ import annotations

import hashlib
import math
import re
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .backend import (
    AttentionEditor,
    BackendDescriptor,
    EncoderState,
    NoisePrediction,
    TokenizedText,
    register_encoder_forward,
)
from .errors import EmptyText, MultiTokenNoun, ShapeMismatch, TextTooLong

TOY_BACKEND_ID = "toy-v1"
UPSAMPLE = 8    # latent cell -> 8x8 image pixels, toy convention
X0_CLIP = 3.0   # denoised-estimate clip range in latent units

_WORD_RE = re.compile(r"[a-z0-9']+")


class ToyTokenizer:
    """Hash words into a fixed vocabulary; bos/eos/pad are reserved ids."""

    def __init__(self, descriptor: BackendDescriptor, vocab_size: int = 512):
        self.descriptor = descriptor
        self.vocab_size = vocab_size

    def word_id(self, word: str) -> int:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        return 3 + int.from_bytes(digest, "big") % (self.vocab_size - 3)

    def split(self, text: str) -> List[str]:
        return _WORD_RE.findall(text.lower())

    def tokenize(self, text: str) -> TokenizedText:
        words = self.split(text)
        if not words:
            raise EmptyText("prompt is empty after trimming")
        d = self.descriptor
        if len(words) > d.L - 2:
            raise TextTooLong(
                f"{len(words)} content tokens exceed the {d.L - 2} available positions"
            )
        ids = [d.bos] + [self.word_id(w) for w in words] + [d.eos]
        ids += [d.pad] * (d.L - len(ids))
        positions = list(range(1, 1 + len(words)))
        return TokenizedText(ids=ids, words=words, word_positions=positions)

    def noun_token_id(self, noun: str) -> int:
        """Resolve a class noun that must map to exactly one token."""
        words = self.split(noun)
        if len(words) != 1:
            raise MultiTokenNoun(f"class noun {noun!r} is not a single token")
        return self.word_id(words[0])


def _randn(gen: torch.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64) * scale


def _encoder_init(gen: torch.Generator, vocab: int, L: int, H: int,
                  n_blocks: int = 2) -> Dict[str, torch.Tensor]:
    params = {
        "tok_emb": _randn(gen, vocab, H, scale=0.5),
        "pos_emb": _randn(gen, L, H, scale=0.1),
    }
    s = 1.0 / math.sqrt(H)
    for b in range(n_blocks):
        params[f"blk{b}.wq"] = _randn(gen, H, H, scale=s)
        params[f"blk{b}.wk"] = _randn(gen, H, H, scale=s)
        params[f"blk{b}.wv"] = _randn(gen, H, H, scale=s)
        params[f"blk{b}.wo"] = _randn(gen, H, H, scale=s)
        params[f"blk{b}.w1"] = _randn(gen, H, 2 * H, scale=s)
        params[f"blk{b}.w2"] = _randn(gen, 2 * H, H, scale=1.0 / math.sqrt(2 * H))
    return params


def _encoder_n_blocks(params: Dict[str, torch.Tensor]) -> int:
    return 1 + max(int(k[3]) for k in params if k.startswith("blk"))


def toy_encode(params: Dict[str, torch.Tensor], ids: Sequence[int],
               descriptor: BackendDescriptor) -> torch.Tensor:
    """Bidirectional contextual encoding; differentiable in ``params``."""
    idx = torch.as_tensor(list(ids), dtype=torch.long)
    h = params["tok_emb"][idx] + params["pos_emb"]
    H = h.shape[1]
    for b in range(_encoder_n_blocks(params)):
        q = h @ params[f"blk{b}.wq"]
        k = h @ params[f"blk{b}.wk"]
        v = h @ params[f"blk{b}.wv"]
        att = torch.softmax(q @ k.T / math.sqrt(H), dim=-1)
        h = h + (att @ v) @ params[f"blk{b}.wo"]
        h = h + torch.tanh(h @ params[f"blk{b}.w1"]) @ params[f"blk{b}.w2"]
    return h


register_encoder_forward(TOY_BACKEND_ID, toy_encode)


def _time_features(t: int, T: int, width: int = 8) -> torch.Tensor:
    tn = t / T
    feats = []
    for k in range(width // 2):
        w = 2.0 * math.pi * (2.0 ** k)
        feats += [math.sin(w * tn), math.cos(w * tn)]
    return torch.tensor(feats, dtype=torch.float64)


class ToySession:
    """Single-threaded handle to the toy backend.

    Descriptor and encoder states are immutable and safe to share; run one
    session per worker for concurrent generation.
    """

    def __init__(self, seed: int = 0, L: int = 16, H: int = 32, latent_side: int = 8,
                 channels: int = 4, d_model: int = 32, vocab_size: int = 512,
                 n_train_timesteps: int = 1000):
        self.seed = seed
        self.descriptor = BackendDescriptor(
            backend_id=TOY_BACKEND_ID,
            L=L,
            H=H,
            latent_side=latent_side,
            attention_sides=[latent_side, latent_side],
            token_ids={"bos": 0, "eos": 1, "pad": 2},
        )
        self.tokenizer = ToyTokenizer(self.descriptor, vocab_size)
        self.channels = channels
        self.d_model = d_model
        self.n_train_timesteps = n_train_timesteps

        gen = torch.Generator().manual_seed(seed)
        self.frozen_encoder = EncoderState(
            kind="frozen",
            parameters=_encoder_init(gen, vocab_size, L, H),
            descriptor=self.descriptor,
        )

        D, C, N = d_model, channels, latent_side * latent_side
        s_in, s_h, s_emb = 1.0 / math.sqrt(C), 1.0 / math.sqrt(D), 1.0 / math.sqrt(H)
        p = {
            "w_in": _randn(gen, C, D, scale=s_in),
            "b_in": torch.zeros(D, dtype=torch.float64),
            "pos": _randn(gen, N, D, scale=0.1),
            "time": _randn(gen, 8, D, scale=0.25),
            "w_out": _randn(gen, D, C, scale=s_h),
            "b_out": torch.zeros(C, dtype=torch.float64),
        }
        for b in range(2):
            p[f"xblk{b}.wq"] = _randn(gen, D, D, scale=s_h)
            p[f"xblk{b}.wk"] = _randn(gen, H, D, scale=s_emb)
            p[f"xblk{b}.wv"] = _randn(gen, H, D, scale=s_emb)
            p[f"xblk{b}.wo"] = _randn(gen, D, D, scale=s_h)
            p[f"xblk{b}.w1"] = _randn(gen, D, 2 * D, scale=s_h)
            p[f"xblk{b}.w2"] = _randn(gen, 2 * D, D, scale=1.0 / math.sqrt(2 * D))
        self.predictor_params = p

        self.w_dec = _randn(gen, channels, 3, scale=1.0)   # latent -> rgb
        self.w_img = _randn(gen, 3, channels, scale=1.0)   # rgb -> latent

        betas = torch.linspace(1e-4, 0.02, n_train_timesteps, dtype=torch.float64)
        self.alpha_bars = torch.cumprod(1.0 - betas, dim=0)

    # --- text side ---

    def tokenize(self, text: str) -> TokenizedText:
        return self.tokenizer.tokenize(text)

    def encode_tokens(self, tokens: Sequence[int],
                      state: Optional[EncoderState] = None) -> torch.Tensor:
        state = state or self.frozen_encoder
        if len(tokens) != self.descriptor.L:
            raise ShapeMismatch(
                f"expected {self.descriptor.L} tokens, got {len(tokens)}"
            )
        return toy_encode(state.parameters, tokens, self.descriptor)

    def empty_prompt_ids(self) -> List[int]:
        d = self.descriptor
        return [d.bos, d.eos] + [d.pad] * (d.L - 2)

    # --- latent side ---

    def predict_noise(self, latent: torch.Tensor, embeddings: torch.Tensor, t: int,
                      attention_editor: Optional[AttentionEditor] = None) -> NoisePrediction:
        side, C, D = self.descriptor.latent_side, self.channels, self.d_model
        if tuple(latent.shape) != (side, side, C):
            raise ShapeMismatch(f"latent must be ({side},{side},{C}), got {tuple(latent.shape)}")
        if tuple(embeddings.shape) != (self.descriptor.L, self.descriptor.H):
            raise ShapeMismatch(
                f"embeddings must be ({self.descriptor.L},{self.descriptor.H}), "
                f"got {tuple(embeddings.shape)}"
            )
        if not 0 <= t < self.n_train_timesteps:
            raise ValueError(f"t={t} outside [0, {self.n_train_timesteps})")

        p = self.predictor_params
        N = side * side
        z = latent.reshape(N, C) @ p["w_in"] + p["b_in"] + p["pos"]
        z = z + _time_features(t, self.n_train_timesteps) @ p["time"]
        maps: List[torch.Tensor] = []
        for b in range(2):
            q = z @ p[f"xblk{b}.wq"]
            k = embeddings @ p[f"xblk{b}.wk"]
            v = embeddings @ p[f"xblk{b}.wv"]
            scores = q @ k.T / math.sqrt(D)          # (N, L) pre-softmax
            if attention_editor is not None:
                scores = attention_editor(scores, layer=b, side=side)
            att = torch.softmax(scores, dim=-1)
            maps.append(att.detach())
            z = z + (att @ v) @ p[f"xblk{b}.wo"]
            z = z + torch.tanh(z @ p[f"xblk{b}.w1"]) @ p[f"xblk{b}.w2"]
        eps = (z @ p["w_out"] + p["b_out"]).reshape(side, side, C)
        return NoisePrediction(predicted_noise=eps, cross_attention_maps=maps)

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        if latent.ndim != 3 or latent.shape[0] != latent.shape[1] or \
                latent.shape[2] != self.channels:
            raise ShapeMismatch(f"latent must be (side,side,{self.channels})")
        rgb = torch.sigmoid(latent @ self.w_dec)
        img = torch.clamp((rgb * 255.0).round(), 0, 255).to(torch.uint8).numpy()
        return img.repeat(UPSAMPLE, axis=0).repeat(UPSAMPLE, axis=1)

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        """Deterministic image -> latent mapping (training-side plumbing)."""
        side = self.descriptor.latent_side
        target = side * UPSAMPLE
        if image.ndim != 3 or image.shape[2] not in (3, 4):
            raise ShapeMismatch("image must be HxWx3 or HxWx4 uint8")
        rgb = image[:, :, :3].astype(np.float64)
        if image.shape[2] == 4:
            a = image[:, :, 3:4].astype(np.float64) / 255.0
            rgb = rgb * a + 255.0 * (1.0 - a)  # over white
        if rgb.shape[0] != target or rgb.shape[1] != target:
            pil = Image.fromarray(rgb.round().astype(np.uint8))
            rgb = np.asarray(
                pil.resize((target, target), Image.BILINEAR), dtype=np.float64
            )
        pooled = rgb.reshape(side, UPSAMPLE, side, UPSAMPLE, 3).mean(axis=(1, 3))
        x = torch.from_numpy(pooled / 255.0 - 0.5)
        return x @ self.w_img

    # --- sampling ---

    def timestep_schedule(self, steps: int) -> List[int]:
        if not 1 <= steps <= self.n_train_timesteps:
            raise ValueError(f"steps must be in [1, {self.n_train_timesteps}]")
        ts = np.linspace(self.n_train_timesteps - 1, 0, steps)
        return [int(round(t)) for t in ts]

    def initial_latent(self, seed: int) -> torch.Tensor:
        side = self.descriptor.latent_side
        gen = torch.Generator().manual_seed(seed)
        return torch.randn(side, side, self.channels, generator=gen, dtype=torch.float64)

    def ddim_sample(
        self,
        cond_embeddings: torch.Tensor,
        *,
        steps: int,
        guidance_scale: float,
        seed: int,
        editor_factory: Optional[Callable[[int], Optional[AttentionEditor]]] = None,
        step_observer: Optional[Callable[[int, List[torch.Tensor]], None]] = None,
    ) -> torch.Tensor:
        """Deterministic DDIM loop; returns the final latent.

        ``editor_factory(i)`` supplies the attention editor for inference step
        ``i`` (conditional pass only). ``step_observer(i, maps)`` receives the
        conditional pass's post-softmax attention maps.
        """
        with torch.no_grad():
            uncond = self.encode_tokens(self.empty_prompt_ids())
            x = self.initial_latent(seed)
            ts = self.timestep_schedule(steps)
            for i, t in enumerate(ts):
                editor = editor_factory(i) if editor_factory is not None else None
                cond_out = self.predict_noise(x, cond_embeddings, t, editor)
                if step_observer is not None:
                    step_observer(i, cond_out.cross_attention_maps)
                if guidance_scale == 1.0:
                    eps = cond_out.predicted_noise
                else:
                    uncond_out = self.predict_noise(x, uncond, t, None)
                    eps = uncond_out.predicted_noise + guidance_scale * (
                        cond_out.predicted_noise - uncond_out.predicted_noise
                    )
                ab_t = self.alpha_bars[t]
                ab_prev = self.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else \
                    torch.tensor(1.0, dtype=torch.float64)
                x0 = (x - torch.sqrt(1.0 - ab_t) * eps) / torch.sqrt(ab_t)
                # clip the denoised estimate; with guidance > 1 the raw update
                # diverges and saturates every attention softmax
                x0 = torch.clamp(x0, -X0_CLIP, X0_CLIP)
                x = torch.sqrt(ab_prev) * x0 + torch.sqrt(1.0 - ab_prev) * eps
            return x

    def sample(self, prompt: str, *, steps: int, guidance_scale: float,
               seed: int) -> np.ndarray:
        """Unmodified text-to-image path: tokenize, encode, sample, decode."""
        emb = self.encode_tokens(self.tokenize(prompt).ids)
        latent = self.ddim_sample(
            emb, steps=steps, guidance_scale=guidance_scale, seed=seed
        )
        return self.decode_latent(latent)


def create_toy_session(seed: int = 0, **kwargs) -> ToySession:
    return ToySession(seed=seed, **kwargs)
