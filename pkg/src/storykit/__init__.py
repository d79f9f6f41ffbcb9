"""Story visualization with portable character plugins.

Pipeline: augment a few character images into a labeled training set,
fine-tune the backend's text encoder on it, distill the encoder into a
compact per-character embedding matrix (a "plugin"), then render story
frames by fusing plugins into prompt embeddings and steering placement with
layout-biased cross-attention editing.
"""

from .backend import (
    BackendDescriptor,
    EncoderState,
    NoisePrediction,
    REAL_BACKEND_DESCRIPTOR,
    TokenizedText,
    decode_latent,
    encode_tokens,
    predict_noise,
    tokenize,
)
from .toy import ToySession, create_toy_session
from .plugin import (
    CharacterPlugin,
    PluginStore,
    deserialize,
    load,
    save,
    serialize,
    validate,
)
from .augment import (
    CharacterImage,
    SceneDescriptionList,
    TrainingDataset,
    build_training_set,
    copy_paste,
    generate_backgrounds,
    load_dataset,
    save_dataset,
)
from .training import (
    FineTuneConfig,
    LossBreakdown,
    TrainResult,
    encoder_from_checkpoint,
    regularization_loss,
    subject_loss,
    total_loss,
    train_text_encoder,
)
from .extraction import (
    EmbeddingMatrix,
    TokenMatrix,
    build_token_matrix,
    encode_token_matrix,
    extract_character_plugin,
    extract_plugin,
)
from .inference import (
    EditSchedule,
    FrameResult,
    GenerationRequest,
    LayoutSpec,
    edit_cross_attention,
    fuse_embeddings,
    generate_frame,
    hash_request,
    rasterize_layout,
    xi,
)
from .story import (
    FrameSpec,
    StoryScript,
    parse_script,
    render_story,
    script_to_dict,
)
from .evaluation import (
    HashEmbedder,
    export_human_eval_sheet,
    image_alignment,
    text_alignment,
)

__version__ = "0.1.0"
