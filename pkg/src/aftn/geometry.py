"""Square bounding boxes, overlap, context cropping and coordinate transforms.

Boxes live either in ``frame`` space (source video pixels) or ``search`` space
(the resized square patch fed to the network); every transform is an exact
affine map between the two.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels

FRAME = "frame"
SEARCH = "search"


class SpaceMismatchError(ValueError):
    """Two boxes from different coordinate spaces were combined."""


@dataclass(frozen=True)
class SquareBox:
    """Axis-aligned square given by center and side length."""

    cx: float
    cy: float
    side: float
    space: str = FRAME

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"box side must be positive, got {self.side}")
        if self.space not in (FRAME, SEARCH):
            raise ValueError(f"unknown coordinate space {self.space!r}")


@dataclass(frozen=True)
class CropWindow:
    """Square crop region; may extend past the frame borders."""

    left: float
    top: float
    side: float
    frame_w: int
    frame_h: int


class FrameImage:
    """One video frame as an (H, W, 3) pixel array with values in [0, 255]."""

    __slots__ = ("width", "height", "pixels")

    def __init__(self, pixels):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"frame pixels must be (H, W, 3), got {pixels.shape}")
        self.pixels = pixels
        self.height = pixels.shape[0]
        self.width = pixels.shape[1]


class SearchPatch:
    """Mean-subtracted S x S x 3 float patch plus the window it came from."""

    __slots__ = ("pixels", "window")

    def __init__(self, pixels, window):
        self.pixels = pixels
        self.window = window

    def chw(self):
        """Channel-first copy for the network."""
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1))


def region_overlap(a, b):
    """Continuous intersection-over-union of two squares in the same space."""
    if a.space != b.space:
        raise SpaceMismatchError(f"cannot overlap {a.space} box with {b.space} box")
    ha = a.side / 2.0
    hb = b.side / 2.0
    ix = min(a.cx + ha, b.cx + hb) - max(a.cx - ha, b.cx - hb)
    iy = min(a.cy + ha, b.cy + hb) - max(a.cy - ha, b.cy - hb)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.side * a.side + b.side * b.side - inter
    return inter / union


def context_window(box, frame_w, frame_h):
    """Window of twice the box side, centered on the box."""
    if box.space != FRAME:
        raise SpaceMismatchError("context window needs a frame-space box")
    side = 2.0 * box.side
    return CropWindow(box.cx - box.side, box.cy - box.side, side, frame_w, frame_h)


def crop_resize(frame, window, mean_rgb, size=224):
    """Bilinearly sample the window to size x size and subtract the mean.

    Sample points falling outside the frame read the mean color, so they end
    up exactly zero in the returned patch.
    """
    if window.side <= 0:
        raise ValueError(f"degenerate crop window with side {window.side}")
    img = np.ascontiguousarray(frame.pixels, dtype=np.float64)
    fill = np.ascontiguousarray(mean_rgb, dtype=np.float64)
    if fill.shape != (3,):
        raise ValueError("mean_rgb must have three entries")
    patch = _kernels.bilinear_patch(
        img, float(window.left), float(window.top), float(window.side), int(size), fill
    )
    patch -= fill[None, None, :]
    return SearchPatch(patch, window)


def to_search_coords(box, window, size=224):
    if box.space != FRAME:
        raise SpaceMismatchError("to_search_coords needs a frame-space box")
    scale = size / window.side
    return SquareBox(
        (box.cx - window.left) * scale,
        (box.cy - window.top) * scale,
        box.side * scale,
        SEARCH,
    )


def to_frame_coords(box, window, size=224):
    if box.space != SEARCH:
        raise SpaceMismatchError("to_frame_coords needs a search-space box")
    scale = window.side / size
    return SquareBox(
        box.cx * scale + window.left,
        box.cy * scale + window.top,
        box.side * scale,
        FRAME,
    )


def encode_target(box, size=224):
    """Search-space box to the network's regression target (cx, cy, side) / S."""
    if box.space != SEARCH:
        raise SpaceMismatchError("encode_target needs a search-space box")
    return np.array([box.cx / size, box.cy / size, box.side / size])


def decode_output(vec, size=224):
    """Inverse of encode_target; the side is clamped to at least one pixel."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {vec.shape}")
    return SquareBox(vec[0] * size, vec[1] * size, max(vec[2] * size, 1.0), SEARCH)
