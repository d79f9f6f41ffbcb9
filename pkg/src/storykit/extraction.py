"""Distill a fine-tuned text encoder into a character plugin.

The character token is slid across every content position of the sequence;
each placement becomes one row of a token matrix. Encoding those rows with
the fine-tuned encoder and reading back the character-token column of each
row yields the per-position embeddings that form the plugin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

from .backend import BackendDescriptor, EncoderState, encode_tokens
from .errors import ShapeMismatch
from .plugin import CharacterPlugin


@dataclass
class TokenMatrix:
    """Q x L ids, Q = L-2. Row q: bos at column q, the character token at
    q+1, eos at q+2, pads everywhere else."""

    rows: np.ndarray  # (Q, L) int64
    character_token_id: int

    @property
    def Q(self) -> int:
        return self.rows.shape[0]

    @property
    def L(self) -> int:
        return self.rows.shape[1]

    def character_column(self, q: int) -> int:
        """Column holding the character token in row q (no diagonal assumption)."""
        cols = np.flatnonzero(self.rows[q] == self.character_token_id)
        if len(cols) != 1:
            raise ShapeMismatch(
                f"row {q} holds {len(cols)} character tokens, expected exactly 1"
            )
        return int(cols[0])


@dataclass
class EmbeddingMatrix:
    """Encoder output over a token matrix: (Q, L, H) with the character
    column of each row carried along."""

    values: torch.Tensor           # (Q, L, H)
    character_columns: List[int]   # len Q

    @property
    def Q(self) -> int:
        return self.values.shape[0]


def build_token_matrix(descriptor: BackendDescriptor, class_noun: str,
                       tokenizer) -> TokenMatrix:
    """Slide the character token across positions 1..L-2."""
    ct = tokenizer.noun_token_id(class_noun)
    L = descriptor.L
    Q = L - 2
    rows = np.full((Q, L), descriptor.pad, dtype=np.int64)
    for q in range(Q):
        rows[q, q] = descriptor.bos
        rows[q, q + 1] = ct
        rows[q, q + 2] = descriptor.eos
    return TokenMatrix(rows=rows, character_token_id=ct)


def encode_token_matrix(finetuned: EncoderState, tm: TokenMatrix) -> EmbeddingMatrix:
    """Encode each row independently; rows must never attend to each other."""
    if tm.L != finetuned.descriptor.L:
        raise ShapeMismatch(
            f"token matrix width {tm.L} != descriptor L {finetuned.descriptor.L}"
        )
    encoded = [encode_tokens(finetuned, tm.rows[q].tolist()) for q in range(tm.Q)]
    columns = [tm.character_column(q) for q in range(tm.Q)]
    return EmbeddingMatrix(values=torch.stack(encoded, dim=0), character_columns=columns)


def extract_plugin(em: EmbeddingMatrix, *, name: str, class_noun: str,
                   descriptor_id: str, created_at: Optional[float] = None) -> CharacterPlugin:
    """Read the character-token embedding out of every row."""
    picked = [em.values[q, em.character_columns[q]] for q in range(em.Q)]
    rows = torch.stack(picked, dim=0).numpy().astype(np.float32)
    kwargs = {} if created_at is None else {"created_at": created_at}
    return CharacterPlugin(
        name=name,
        class_noun=class_noun,
        rows=rows,
        descriptor_id=descriptor_id,
        **kwargs,
    )


def extract_character_plugin(session, finetuned: EncoderState, *, name: str,
                             class_noun: str) -> CharacterPlugin:
    """Full distillation: token matrix -> embedding matrix -> plugin."""
    tm = build_token_matrix(session.descriptor, class_noun, session.tokenizer)
    em = encode_token_matrix(finetuned, tm)
    return extract_plugin(
        em,
        name=name,
        class_noun=class_noun,
        descriptor_id=session.descriptor.backend_id,
    )
