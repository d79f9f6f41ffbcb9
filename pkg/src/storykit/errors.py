"""Exception hierarchy shared across the toolkit.

Every error carries a stable machine-readable ``code`` so the CLI and the
HTTP service can map failures without string matching.
"""

from __future__ import annotations


class StorykitError(Exception):
    """Base class; ``code`` is stable across releases."""

    code = "storykit_error"


class ValidationError(StorykitError):
    """Bad user input or malformed artifact (CLI exit code 3, HTTP 400/422)."""

    code = "validation_error"


class RuntimeFailure(StorykitError):
    """Operation failed mid-flight (CLI exit code 4, HTTP 500)."""

    code = "runtime_failure"


# --- tokenizer / encoder ---

class EmptyText(ValidationError):
    code = "empty_text"


class TextTooLong(ValidationError):
    code = "text_too_long"


class ShapeMismatch(ValidationError):
    code = "shape_mismatch"


class MultiTokenNoun(ValidationError):
    code = "multi_token_noun"


class UnknownClassNoun(MultiTokenNoun):
    # raised where a loss needs a single-token noun; subclass keeps old handlers working
    code = "unknown_class_noun"


class DescriptorMismatch(ValidationError):
    code = "descriptor_mismatch"


# --- plugin file format ---

class BadMagic(ValidationError):
    code = "bad_magic"


class VersionUnsupported(ValidationError):
    code = "version_unsupported"


class DimMismatch(ValidationError):
    code = "dim_mismatch"


class NonFiniteEntry(ValidationError):
    code = "non_finite_entry"


# --- augmentation ---

class EmptySceneList(ValidationError):
    code = "empty_scene_list"


class EmptyCharacterDir(ValidationError):
    code = "empty_character_dir"


class CharacterTooLarge(ValidationError):
    code = "character_too_large"


# --- training ---

class NonFiniteLoss(RuntimeFailure):
    code = "non_finite_loss"


# --- inference ---

class CharacterNotInPrompt(ValidationError):
    code = "character_not_in_prompt"


class PositionOutOfRange(ValidationError):
    code = "position_out_of_range"


class UnknownCharacter(ValidationError):
    code = "unknown_character"


class AmbiguousFusion(ValidationError):
    code = "ambiguous_fusion"


# --- story pipeline ---

class SchemaViolation(ValidationError):
    code = "schema_violation"


class MissingPlugin(ValidationError):
    code = "missing_plugin"


class DuplicatePlugin(ValidationError):
    code = "duplicate_plugin"
