"""Attentive two-stream bounding-box regression tracking laboratory."""

from ._kernels import BACKEND
from .geometry import (
    CropWindow,
    FrameImage,
    SearchPatch,
    SquareBox,
    context_window,
    crop_resize,
    decode_output,
    encode_target,
    region_overlap,
    to_frame_coords,
    to_search_coords,
)
from .network import (
    AFTN,
    AFTN_C,
    AFTN_NO_ATT,
    BASELINE,
    FenConfig,
    TrackerModel,
    load_model,
    model_forward,
    save_model,
)
from .numerics import NumericError, OptimConfig, Param, Tensor
from .trackeval import (
    ModelTracker,
    OracleTracker,
    Scores,
    StayPutTracker,
    evaluate_tracker,
    track_sequence,
    train,
)

__version__ = "0.1.0"
