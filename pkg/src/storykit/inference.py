"""Plugin-guided and layout-guided frame generation.

Fusion swaps the prompt's class-noun embedding rows for the plugin row
distilled for that exact sequence position. Layout guidance rasterizes each
character's normalized box into a per-resolution bias map (positive inside,
strongly negative outside) and adds it, scaled by a decaying schedule, to
that character's pre-softmax cross-attention scores at every step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import (
    AmbiguousFusion,
    CharacterNotInPrompt,
    DescriptorMismatch,
    PositionOutOfRange,
    ShapeMismatch,
    UnknownCharacter,
    ValidationError,
)
from .plugin import CharacterPlugin

DEFAULT_POSITIVE = 2.5
DEFAULT_NEGATIVE = -1e8

Box = Tuple[float, float, float, float]  # (x0, y0, x1, y1), normalized


@dataclass
class LayoutSpec:
    """Per-character boxes plus the edit-strength values for one frame."""

    boxes: Dict[str, Box] = field(default_factory=dict)
    positive_value: float = DEFAULT_POSITIVE
    negative_value: float = DEFAULT_NEGATIVE

    def __post_init__(self):
        for name, box in self.boxes.items():
            x0, y0, x1, y1 = box
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise ValidationError(
                    f"box for {name!r} must satisfy 0 <= x0 < x1 <= 1 and "
                    f"0 <= y0 < y1 <= 1, got {box}"
                )
            self.boxes[name] = (float(x0), float(y0), float(x1), float(y1))
        if not (self.positive_value > 0 > self.negative_value):
            raise ValidationError(
                f"need positive_value > 0 > negative_value, got "
                f"{self.positive_value} / {self.negative_value}"
            )

    def to_dict(self) -> dict:
        return {
            "boxes": {k: list(v) for k, v in sorted(self.boxes.items())},
            "positive_value": self.positive_value,
            "negative_value": self.negative_value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutSpec":
        return cls(
            boxes={k: tuple(v) for k, v in d.get("boxes", {}).items()},
            positive_value=d.get("positive_value", DEFAULT_POSITIVE),
            negative_value=d.get("negative_value", DEFAULT_NEGATIVE),
        )


@dataclass
class EditSchedule:
    """Edit strength over inference steps; never increases with t."""

    schedule_kind: str = "linear_decay"  # or "constant_window"
    active_fraction: float = 0.5
    base_scale: float = 1.0

    def __post_init__(self):
        if self.schedule_kind not in ("linear_decay", "constant_window"):
            raise ValidationError(f"unknown schedule kind {self.schedule_kind!r}")
        if not 0.0 < self.active_fraction <= 1.0:
            raise ValidationError(
                f"active_fraction must be in (0, 1], got {self.active_fraction}"
            )
        if self.base_scale < 0:
            raise ValidationError(f"base_scale must be >= 0, got {self.base_scale}")

    def to_dict(self) -> dict:
        return {
            "schedule_kind": self.schedule_kind,
            "active_fraction": self.active_fraction,
            "base_scale": self.base_scale,
        }


DEFAULT_SCHEDULE = EditSchedule()


def xi(schedule: EditSchedule, t: int, T: int) -> float:
    """Edit strength at inference step t of T."""
    window = schedule.active_fraction * T
    if schedule.schedule_kind == "linear_decay":
        return schedule.base_scale * max(0.0, 1.0 - t / window)
    return schedule.base_scale if t < window else 0.0


@dataclass
class GenerationRequest:
    prompt: str
    plugins: List[CharacterPlugin] = field(default_factory=list)
    layout: LayoutSpec = field(default_factory=LayoutSpec)
    seed: int = 0
    steps: int = 100
    guidance_scale: float = 7.5

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")


def request_hash(prompt: str, plugin_names: Sequence[str], layout: LayoutSpec,
                 seed: int, steps: int, guidance_scale: float) -> str:
    """Stable identity of a generation request (used by manifests and the
    service tamper check)."""
    payload = {
        "prompt": prompt,
        "plugins": list(plugin_names),
        "layout": layout.to_dict(),
        "seed": seed,
        "steps": steps,
        "guidance_scale": guidance_scale,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def hash_request(request: GenerationRequest) -> str:
    return request_hash(
        request.prompt,
        [p.name for p in request.plugins],
        request.layout,
        request.seed,
        request.steps,
        request.guidance_scale,
    )


# --- embedding fusion ---

def _plugin_positions(prompt_tokens: Sequence[int], plugins: Sequence[CharacterPlugin],
                      tokenizer) -> Dict[str, List[int]]:
    L = len(prompt_tokens)
    positions: Dict[str, List[int]] = {}
    seen_ids: Dict[int, str] = {}
    for plugin in plugins:
        ct = tokenizer.noun_token_id(plugin.class_noun)
        if ct in seen_ids:
            raise AmbiguousFusion(
                f"plugins {seen_ids[ct]!r} and {plugin.name!r} resolve to the "
                f"same class-noun token"
            )
        seen_ids[ct] = plugin.name
        occ = [i for i, tok in enumerate(prompt_tokens) if tok == ct]
        if not occ:
            raise CharacterNotInPrompt(
                f"class noun {plugin.class_noun!r} of plugin {plugin.name!r} "
                f"does not occur in the prompt"
            )
        for p in occ:
            if not 1 <= p <= L - 2:
                raise PositionOutOfRange(
                    f"token of {plugin.class_noun!r} at position {p} is outside 1..{L - 2}"
                )
        positions[plugin.name] = occ
    return positions


def fuse_embeddings(eb: torch.Tensor, prompt_tokens: Sequence[int],
                    plugins: Sequence[CharacterPlugin], tokenizer) -> torch.Tensor:
    """Replace each class-noun row of ``eb`` with the plugin row distilled
    for that position; every other row is left bit-identical."""
    L, H = eb.shape
    for plugin in plugins:
        rows, cols = plugin.rows.shape
        if rows != L - 2 or cols != H:
            raise ShapeMismatch(
                f"plugin {plugin.name!r} is {rows}x{cols}, need {L - 2}x{H}"
            )
    positions = _plugin_positions(prompt_tokens, plugins, tokenizer)
    fused = eb.clone()
    for plugin in plugins:
        for p in positions[plugin.name]:
            fused[p] = torch.from_numpy(
                plugin.row_for_position(p).copy()
            ).to(eb.dtype)
    return fused


# --- layout rasterization and attention editing ---

def rasterize_layout(layout: LayoutSpec, character: str, side: int) -> torch.Tensor:
    """(side, side) bias map: positive inside the character's box, negative
    outside. A cell belongs to the box iff its centre does."""
    if character not in layout.boxes:
        raise UnknownCharacter(f"no box for character {character!r}")
    x0, y0, x1, y1 = layout.boxes[character]
    centers = (np.arange(side, dtype=np.float64) + 0.5) / side
    in_x = (centers >= x0) & (centers < x1)
    in_y = (centers >= y0) & (centers < y1)
    inside = np.outer(in_y, in_x)  # rows are y, columns are x
    bias = np.where(inside, layout.positive_value, layout.negative_value)
    return torch.from_numpy(bias)


def edit_cross_attention(cam: torch.Tensor, bias_map: torch.Tensor,
                         xi_value: float) -> torch.Tensor:
    """Elementwise pre-softmax edit: cam + xi * bias. xi == 0 is exempt from
    float arithmetic entirely so it stays a bitwise no-op."""
    if cam.shape != bias_map.shape:
        raise ShapeMismatch(
            f"attention map {tuple(cam.shape)} vs bias map {tuple(bias_map.shape)}"
        )
    if xi_value == 0.0:
        return cam
    return cam + xi_value * bias_map


def attention_mass_inside(att: torch.Tensor, token_positions: Sequence[int],
                          inside_flat: torch.Tensor) -> float:
    """Fraction of a token's spatial attention that lands inside the box.

    ``att`` is a post-softmax (cells, L) map; mass is averaged over the
    character's token positions.
    """
    vals = []
    for p in token_positions:
        col = att[:, p]
        total = float(col.sum())
        vals.append(float(col[inside_flat].sum()) / total if total > 0 else 0.0)
    return float(np.mean(vals))


@dataclass
class FrameResult:
    image: np.ndarray
    latent: torch.Tensor
    diagnostics: dict


def generate_frame(
    request: GenerationRequest,
    session,
    schedule: EditSchedule = DEFAULT_SCHEDULE,
    edit_layers: Optional[Sequence[int]] = None,
    on_step: Optional[Callable[[int, int], None]] = None,
) -> FrameResult:
    """Fuse plugins once, then run DDIM with per-step attention editing.

    ``edit_layers`` restricts which cross-attention layers receive edits
    (default: all of them). Diagnostics carry per-step edit strengths and
    each boxed character's in-box attention mass over time.
    """
    for plugin in request.plugins:
        if plugin.descriptor_id != session.descriptor.backend_id:
            raise DescriptorMismatch(
                f"plugin {plugin.name!r} was distilled for backend "
                f"{plugin.descriptor_id!r}, session is {session.descriptor.backend_id!r}"
            )
    plugin_names = {p.name for p in request.plugins}
    for name in request.layout.boxes:
        if name not in plugin_names:
            raise UnknownCharacter(
                f"layout box {name!r} does not match any requested plugin"
            )

    tokenized = session.tokenize(request.prompt)
    eb = session.encode_tokens(tokenized.ids)
    if request.plugins:
        fused = fuse_embeddings(eb, tokenized.ids, request.plugins, session.tokenizer)
        positions = _plugin_positions(tokenized.ids, request.plugins, session.tokenizer)
    else:
        fused = eb
        positions = {}

    boxed = [p.name for p in request.plugins if p.name in request.layout.boxes]
    sides = sorted(set(session.descriptor.attention_sides))
    bias_flat: Dict[int, Dict[str, torch.Tensor]] = {}
    inside_flat: Dict[int, Dict[str, torch.Tensor]] = {}
    for side in sides:
        bias_flat[side] = {}
        inside_flat[side] = {}
        for name in boxed:
            bias = rasterize_layout(request.layout, name, side)
            bias_flat[side][name] = bias.reshape(-1)
            inside_flat[side][name] = (bias > 0).reshape(-1)

    layers = set(range(len(session.descriptor.attention_sides))) \
        if edit_layers is None else set(edit_layers)

    xi_series = [xi(schedule, i, request.steps) for i in range(request.steps)]
    mass_series: Dict[str, List[float]] = {name: [] for name in boxed}
    final_maps: List[torch.Tensor] = []

    def editor_factory(step: int):
        strength = xi_series[step]
        if strength == 0.0 or not boxed:
            return None

        def editor(scores: torch.Tensor, layer: int, side: int) -> torch.Tensor:
            if layer not in layers:
                return scores
            edited = scores.clone()
            for name in boxed:
                bias = bias_flat[side][name]
                for p in positions[name]:
                    edited[:, p] = edited[:, p] + strength * bias
            return edited

        return editor

    def observer(step: int, maps: List[torch.Tensor]) -> None:
        for name in boxed:
            per_layer = []
            for layer, att in enumerate(maps):
                side = session.descriptor.attention_sides[layer]
                per_layer.append(
                    attention_mass_inside(att, positions[name], inside_flat[side][name])
                )
            mass_series[name].append(float(np.mean(per_layer)))
        if step == request.steps - 1:
            final_maps.extend(maps)
        if on_step is not None:
            on_step(step + 1, request.steps)

    latent = session.ddim_sample(
        fused,
        steps=request.steps,
        guidance_scale=request.guidance_scale,
        seed=request.seed,
        editor_factory=editor_factory,
        step_observer=observer if (boxed or on_step is not None) else None,
    )
    image = session.decode_latent(latent)

    diagnostics = {
        "request_hash": hash_request(request),
        "seed": request.seed,
        "steps": request.steps,
        "guidance_scale": request.guidance_scale,
        "schedule": schedule.to_dict(),
        "xi": xi_series,
        "characters": {
            name: {
                "token_positions": positions[name],
                "box": list(request.layout.boxes[name]),
                "attention_mass": mass_series[name],
            }
            for name in boxed
        },
    }
    return FrameResult(image=image, latent=latent, diagnostics=diagnostics)
