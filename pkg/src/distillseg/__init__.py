"""distillseg: tongue segmentation with multi-teacher distillation,
diffusion-based augmentation, a metric suite, and a batch/interactive
segmentation service."""

__version__ = "0.1.0"

from .imaging import (  # noqa: F401
    BinaryMask,
    DatasetSplit,
    LabeledSample,
    ProbMap,
    RasterImage,
    SplitData,
    extract_patch,
    load_dataset,
    load_image,
    load_mask,
    save_image,
    save_mask,
    split_dataset,
    synth_fixture,
    write_dataset,
)
