"""Dataset ingestion, preprocessing, folds and the synthetic generator."""
from .preprocess import (
    N_FRAMES,
    FrameDecodeError,
    bilinear_matrix,
    decode_image,
    map_label,
    preprocess_frame,
    resize_bilinear,
    temporal_indices,
    temporal_resample,
    to_grayscale,
)
from .manifest import (
    Manifest,
    ManifestError,
    ManifestRow,
    VideoSample,
    load_labeled_frames,
    load_manifest,
    load_unlabeled_frames,
    load_video,
    make_folds,
    write_manifest,
)
from .synth import SynthDataset, SynthSpec, draw_pattern, synth_dataset, synth_frames, write_dataset
