"""Text-encoder fine-tuning on a class-noun-labeled training set.

Two terms drive the update: a subject-preservation term (noise-prediction
MSE with the bare class noun as conditioning text) and a regularization
term that pins the embeddings of non-character positions (bos, eos and,
by default, every pad) to the frozen encoder. Only text-encoder parameters
move; the noise predictor and the frozen encoder are untouched.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import torch

from .augment import TrainingDataset
from .backend import EncoderState, check_same_descriptor, encoder_forward
from .errors import NonFiniteLoss, UnknownClassNoun, ValidationError

CHECKPOINT_VERSION = 1


@dataclass
class FineTuneConfig:
    steps: int
    learning_rate: float = 5e-6
    lambda_reg: float = 0.01
    batch_size: int = 1
    seed: int = 0
    nct_include_pads: bool = True  # regularize pads too, not just bos/eos

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_reg < 0:
            raise ValidationError(f"lambda_reg must be >= 0, got {self.lambda_reg}")


@dataclass
class LossBreakdown:
    l_sub: float
    l_reg: float
    l_total: float


def _noun_ids(session, class_noun: str) -> Tuple[List[int], int]:
    """Token sequence of the bare class noun; the noun sits at position 1."""
    try:
        tokenized = session.tokenize(class_noun)
    except Exception as exc:
        raise UnknownClassNoun(str(exc)) from exc
    if len(tokenized.words) != 1:
        raise UnknownClassNoun(f"class noun {class_noun!r} is not a single token")
    return tokenized.ids, 1


def non_character_positions(n_positions: int, char_position: int,
                            include_pads: bool = True) -> List[int]:
    if include_pads:
        return [i for i in range(n_positions) if i != char_position]
    return [0, char_position + 1]  # bos and eos only


def embedding_drift(e_t: torch.Tensor, e_f: torch.Tensor,
                    positions: List[int]) -> torch.Tensor:
    """Sum of squared L2 distances between the two encodings at ``positions``."""
    return sum(torch.sum((e_t[i] - e_f[i]) ** 2) for i in positions)


def loss_terms(
    params: Dict[str, torch.Tensor],
    frozen_params: Dict[str, torch.Tensor],
    session,
    image_latent: torch.Tensor,
    noun_ids: List[int],
    char_position: int,
    t: int,
    noise: torch.Tensor,
    include_pads: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Differentiable (l_sub, l_reg) for one (image, t, noise) triple."""
    encode = encoder_forward(session.descriptor)
    emb = encode(params, noun_ids, session.descriptor)

    ab = session.alpha_bars[t]
    x_t = torch.sqrt(ab) * image_latent + torch.sqrt(1.0 - ab) * noise
    pred = session.predict_noise(x_t, emb, t).predicted_noise
    l_sub = torch.mean((pred - noise) ** 2)

    with torch.no_grad():
        frozen_emb = encode(frozen_params, noun_ids, session.descriptor)
    positions = non_character_positions(len(noun_ids), char_position, include_pads)
    l_reg = embedding_drift(emb, frozen_emb, positions)
    return l_sub, l_reg


def subject_loss(encoder: EncoderState, session, image_latent: torch.Tensor,
                 class_noun: str, t: int, noise: Optional[torch.Tensor] = None,
                 seed: Optional[int] = None) -> float:
    """MSE between predicted and injected noise on the forward-noised latent."""
    noun_ids, _ = _noun_ids(session, class_noun)
    if noise is None:
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        noise = torch.randn(image_latent.shape, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        emb = encoder_forward(session.descriptor)(encoder.parameters, noun_ids, session.descriptor)
        ab = session.alpha_bars[t]
        x_t = torch.sqrt(ab) * image_latent + torch.sqrt(1.0 - ab) * noise
        pred = session.predict_noise(x_t, emb, t).predicted_noise
        return float(torch.mean((pred - noise) ** 2))


def regularization_loss(finetuned: EncoderState, frozen: EncoderState,
                        class_noun: str, tokenizer=None,
                        include_pads: bool = True) -> float:
    """Squared drift of every non-character position of the noun sequence."""
    check_same_descriptor(finetuned.descriptor, frozen.descriptor)
    if tokenizer is None:
        raise ValidationError("regularization_loss needs the backend tokenizer")
    words = tokenizer.split(class_noun)
    if len(words) != 1:
        raise UnknownClassNoun(f"class noun {class_noun!r} is not a single token")
    d = finetuned.descriptor
    ids = [d.bos, tokenizer.word_id(words[0]), d.eos] + [d.pad] * (d.L - 3)
    with torch.no_grad():
        encode = encoder_forward(d)
        e_t = encode(finetuned.parameters, ids, d)
        e_f = encode(frozen.parameters, ids, d)
        positions = non_character_positions(d.L, 1, include_pads)
        return float(embedding_drift(e_t, e_f, positions))


def total_loss(l_sub: float, l_reg: float, lambda_reg: float) -> float:
    return l_sub + lambda_reg * l_reg


@dataclass
class TrainResult:
    encoder: EncoderState
    history: List[Tuple[int, float, float, float]]  # (step, l_sub, l_reg, l_total)
    final_step: int = 0
    checkpoint_path: Optional[str] = None


def _save_checkpoint(path, params, config: FineTuneConfig, step: int,
                     rng_state: torch.Tensor, class_noun: str) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(config),
            "class_noun": class_noun,
            "step": step,
            "parameters": {k: v.detach().clone() for k, v in params.items()},
            "rng_state": rng_state,
        },
        path,
    )


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, weights_only=True)
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"checkpoint version {ckpt.get('format_version')} not supported"
        )
    return ckpt


def encoder_from_checkpoint(path, session) -> Tuple[EncoderState, str]:
    ckpt = load_checkpoint(path)
    state = EncoderState(
        kind="finetuned",
        parameters=ckpt["parameters"],
        descriptor=session.descriptor,
    )
    return state, ckpt["class_noun"]


def train_text_encoder(
    dataset: TrainingDataset,
    config: FineTuneConfig,
    session,
    *,
    checkpoint_path=None,
    resume_from=None,
    history_path=None,
    progress: Optional[Callable[[int, int], None]] = None,
) -> TrainResult:
    """Plain SGD over seeded (image, t, noise) triples.

    Deterministic given (dataset, config, session seed); resuming from a
    checkpoint continues the exact sample sequence.
    """
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    noun_ids, char_pos = _noun_ids(session, dataset.label)

    frozen = session.frozen_encoder
    gen = torch.Generator().manual_seed(config.seed)
    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        params = {k: v.clone().requires_grad_(True)
                  for k, v in ckpt["parameters"].items()}
        gen.set_state(ckpt["rng_state"])
        start_step = ckpt["step"]
    else:
        params = {k: v.detach().clone().requires_grad_(True)
                  for k, v in frozen.parameters.items()}

    # latents are deterministic per image; hoist out of the step loop
    latents = [session.encode_image(img) for img in dataset.training_images()]

    history: List[Tuple[int, float, float, float]] = []
    for step in range(start_step, config.steps):
        l_sub_acc = torch.zeros((), dtype=torch.float64)
        l_reg_acc = torch.zeros((), dtype=torch.float64)
        for _ in range(config.batch_size):
            idx = int(torch.randint(len(latents), (1,), generator=gen))
            t = int(torch.randint(session.n_train_timesteps, (1,), generator=gen))
            noise = torch.randn(latents[idx].shape, generator=gen, dtype=torch.float64)
            l_sub, l_reg = loss_terms(
                params, frozen.parameters, session, latents[idx],
                noun_ids, char_pos, t, noise, config.nct_include_pads,
            )
            l_sub_acc = l_sub_acc + l_sub
            l_reg_acc = l_reg_acc + l_reg
        l_sub_mean = l_sub_acc / config.batch_size
        l_reg_mean = l_reg_acc / config.batch_size
        l_total = l_sub_mean + config.lambda_reg * l_reg_mean

        if not torch.isfinite(l_total):
            if checkpoint_path is not None:
                _save_checkpoint(checkpoint_path, params, config, step,
                                 gen.get_state(), dataset.label)
            raise NonFiniteLoss(f"loss became non-finite at step {step}")

        for p in params.values():
            if p.grad is not None:
                p.grad = None
        l_total.backward()
        with torch.no_grad():
            for p in params.values():
                if p.grad is not None:
                    p -= config.learning_rate * p.grad

        history.append(
            (step, float(l_sub_mean.detach()), float(l_reg_mean.detach()),
             float(l_total.detach()))
        )
        if progress is not None:
            progress(step + 1, config.steps)

    finetuned = EncoderState(
        kind="finetuned",
        parameters={k: v.detach().clone() for k, v in params.items()},
        descriptor=session.descriptor,
    )
    if checkpoint_path is not None:
        _save_checkpoint(checkpoint_path, params, config, config.steps,
                         gen.get_state(), dataset.label)
    if history_path is not None:
        write_loss_history(history, history_path)
    return TrainResult(
        encoder=finetuned,
        history=history,
        final_step=config.steps,
        checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
    )


def write_loss_history(history, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "l_sub", "l_reg", "l_total"])
        writer.writerows(history)
