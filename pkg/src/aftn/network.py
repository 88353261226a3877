"""Tracker model: feature extractor, channel attention, fusion and regression.

The model is assembled from the numerics ops; a forward pass in train mode
records (tensor, backward) steps in creation order, and ``ForwardResult.backward``
replays them in reverse. Four variants share the same skeleton:

  aftn         two streams, attention on all five levels
  aftn-no-att  two streams, no attention
  aftn-c       current-frame stream only, with attention
  baseline     two streams, last-level features only, no attention
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import SearchPatch
from .numerics import (
    BatchNormState,
    ConfigError,
    DimensionError,
    Param,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    dropout,
    fully_connected,
    maxpool2d,
    relu,
    scale_channels,
    sigmoid_biased,
)

AFTN = "aftn"
AFTN_NO_ATT = "aftn-no-att"
AFTN_C = "aftn-c"
BASELINE = "baseline"
VARIANTS = (AFTN, AFTN_NO_ATT, AFTN_C, BASELINE)

TOY_CHANNELS = (4, 8, 16, 16, 16)
FULL_CHANNELS = (96, 256, 512, 512, 512)

# (kernel, stride, pad, followed by 3x3/s2 maxpool)
_FEN_GEOMETRY = ((7, 2, 0, True), (5, 2, 2, True), (3, 1, 1, False), (3, 1, 1, False), (3, 1, 1, True))

_COMMON_SIZE = 6
_CAN_UNITS = _COMMON_SIZE * _COMMON_SIZE

_RNG_PURPOSE = {"fen": 1, "cans": 2, "head": 3, "dropout": 4, "sampling": 5, "generation": 6}


def derived_rng(seed, purpose):
    """Independent per-purpose generator so variants share initializations."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _RNG_PURPOSE[purpose]]))


@dataclass
class FenConfig:
    channels: tuple = TOY_CHANNELS
    input_size: int = 224
    frozen: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 5 or any(c < 1 for c in self.channels):
            raise ConfigError("FEN needs five positive channel counts")


def _uniform_init(rng, shape, fan_in):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _ConvLayer:
    __slots__ = ("kernels", "bias", "stride", "pad", "pooled")

    def __init__(self, rng, c_in, c_out, k, stride, pad, pooled=False):
        self.kernels = Param(_uniform_init(rng, (c_out, c_in, k, k), c_in * k * k), decay=True)
        self.bias = Param(np.zeros(c_out))
        self.stride = stride
        self.pad = pad
        self.pooled = pooled

    def params(self):
        return [self.kernels, self.bias]


class _FcLayer:
    __slots__ = ("weights", "bias")

    def __init__(self, rng, n_in, n_out, bias_init=None):
        self.weights = Param(_uniform_init(rng, (n_out, n_in), n_in), decay=True)
        b = np.zeros(n_out) if bias_init is None else np.asarray(bias_init, dtype=np.float64)
        self.bias = Param(b)

    def params(self):
        return [self.weights, self.bias]


class Fen:
    """Five conv levels tapped at 54/13/13/13/6 for a 224 input."""

    def __init__(self, config, rng):
        self.config = config
        self.layers = []
        c_prev = 3
        for (k, stride, pad, pooled), c_out in zip(_FEN_GEOMETRY, config.channels):
            self.layers.append(_ConvLayer(rng, c_prev, c_out, k, stride, pad, pooled))
            c_prev = c_out
        self.level_sizes = self._trace_sizes(config.input_size)

    @staticmethod
    def _trace_sizes(s):
        sizes = []
        for k, stride, pad, pooled in _FEN_GEOMETRY:
            s = (s + 2 * pad - k) // stride + 1
            if pooled:
                s = (s - 3) // 2 + 1
            sizes.append(s)
        return tuple(sizes)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


class Can:
    """Two-layer perceptron scoring one flattened 6x6 channel."""

    def __init__(self, rng, level):
        self.level = level
        self.fc1 = _FcLayer(rng, _CAN_UNITS, _CAN_UNITS)
        self.fc2 = _FcLayer(rng, _CAN_UNITS, 1)

    def params(self):
        return self.fc1.params() + self.fc2.params()


class Head:
    """1x1 fusion conv with batch norm, then three fully connected layers."""

    def __init__(self, rng, c_total, fuse_kernels, fc_units):
        self.fuse = _ConvLayer(rng, c_total, fuse_kernels, 1, 1, 0)
        self.bn_gamma = Param(np.ones(fuse_kernels))
        self.bn_beta = Param(np.zeros(fuse_kernels))
        self.bn_state = BatchNormState(fuse_kernels)
        flat = fuse_kernels * _COMMON_SIZE * _COMMON_SIZE
        self.fc1 = _FcLayer(rng, flat, fc_units)
        self.fc2 = _FcLayer(rng, fc_units, fc_units)
        # Start at the centered stay-put prior so early outputs decode sanely.
        self.fc3 = _FcLayer(rng, fc_units, 3, bias_init=(0.5, 0.5, 0.5))

    def params(self):
        return (
            self.fuse.params()
            + [self.bn_gamma, self.bn_beta]
            + self.fc1.params()
            + self.fc2.params()
            + self.fc3.params()
        )


class AttentionWeights:
    """Channel weights recorded during the latest forward, per stream and level."""

    __slots__ = ("streams",)

    def __init__(self, streams):
        self.streams = streams  # dict: stream name -> list of (B, C_level) arrays

    def all_values(self):
        return np.concatenate([w.ravel() for ws in self.streams.values() for w in ws])


class ForwardResult:
    __slots__ = ("out", "weights", "_chain")

    def __init__(self, out, weights, chain):
        self.out = out
        self.weights = weights
        self._chain = chain

    def backward(self):
        """Replay recorded steps in reverse; seed ``out.grad`` first."""
        if self._chain is None:
            raise ConfigError("backward is only available after a train-mode forward")
        for t, back in reversed(self._chain):
            back(t.grad)


def _reshape_step(x, shape):
    out = Tensor(x.data.reshape(shape))

    def back(up):
        x.grad += up.reshape(x.data.shape)

    return out, back


def _slice_rows_step(x, a, b):
    out = Tensor(x.data[a:b])

    def back(up):
        x.grad[a:b] += up

    return out, back


def _pool_cascade(t, level, push):
    """Bring one FEN level to the common 6x6 size (level index 0-based)."""
    if level == 0:
        t, b = maxpool2d(t, 6, 4)
        push((t, b))
        t, b = maxpool2d(t, 3, 2)
        push((t, b))
    elif level in (1, 2, 3):
        t, b = maxpool2d(t, 3, 2)
        push((t, b))
    return t


def _can_omega(flat, can, push):
    """Score flattened channels (M, 36) -> weights (M, 1) in (0.5, 1.5)."""
    h, b = fully_connected(flat, can.fc1.weights, can.fc1.bias)
    push((h, b))
    h, b = relu(h)
    push((h, b))
    o, b = fully_connected(h, can.fc2.weights, can.fc2.bias)
    push((o, b))
    o, b = sigmoid_biased(o)
    push((o, b))
    return o


class TrackerModel:
    def __init__(self, variant=AFTN, fen_config=None, fuse_kernels=32, fc_units=128, seed=0):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        self.variant = variant
        self.fen_config = fen_config or FenConfig()
        self.fuse_kernels = int(fuse_kernels)
        self.fc_units = int(fc_units)
        self.seed = int(seed)

        self.fen = Fen(self.fen_config, derived_rng(seed, "fen"))
        if self.fen.level_sizes[4] != _COMMON_SIZE:
            raise ConfigError(
                f"input size {self.fen_config.input_size} does not reach the "
                f"{_COMMON_SIZE}x{_COMMON_SIZE} common map (level sizes {self.fen.level_sizes})"
            )

        if self.has_attention:
            can_rng = derived_rng(seed, "cans")
            self.cans = [Can(can_rng, level) for level in range(1, 6)]
        else:
            self.cans = None

        ch = self.fen_config.channels
        if variant == BASELINE:
            c_total = 2 * ch[4]
        elif variant == AFTN_C:
            c_total = sum(ch)
        else:
            c_total = 2 * sum(ch)
        self.head = Head(derived_rng(seed, "head"), c_total, self.fuse_kernels, self.fc_units)
        self.mean_rgb = np.zeros(3)  # preprocessing constant, set by training
        self._dropout_rng = derived_rng(seed, "dropout")

    @property
    def has_attention(self):
        return self.variant in (AFTN, AFTN_C)

    @property
    def two_stream(self):
        return self.variant in (AFTN, AFTN_NO_ATT, BASELINE)

    @property
    def input_size(self):
        return self.fen_config.input_size

    def fen_params(self):
        return self.fen.params()

    def all_params(self):
        out = self.fen.params()
        if self.cans:
            for can in self.cans:
                out.extend(can.params())
        out.extend(self.head.params())
        return out

    def trainable_params(self):
        out = [] if self.fen_config.frozen else self.fen.params()
        if self.cans:
            for can in self.cans:
                out.extend(can.params())
        out.extend(self.head.params())
        return out

    # -- forward -----------------------------------------------------------

    def forward(self, prev, curr, mode="eval", rng=None):
        """Run the network on (B, 3, S, S) arrays; ``prev`` is ignored by aftn-c.

        Returns a ForwardResult whose ``out`` holds the encoded (B, 3) boxes.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {mode!r}")
        curr = self._check_patch(curr, "curr")
        if self.two_stream:
            prev = self._check_patch(prev, "prev")
            if prev.shape != curr.shape:
                raise DimensionError("prev and curr batches must match")
            stacked = np.concatenate([prev, curr], axis=0)
        else:
            stacked = curr
        B = curr.shape[0]

        train = mode == "train"
        chain = [] if train else None
        push = chain.append if train else (lambda step: None)
        fen_push = push if (train and not self.fen_config.frozen) else (lambda step: None)
        drop_rng = rng if rng is not None else self._dropout_rng

        t = Tensor(stacked)
        feats = []
        for li, layer in enumerate(self.fen.layers):
            t, b = conv2d(t, layer.kernels, layer.bias, layer.stride, layer.pad,
                          need_input_grad=(li > 0))
            fen_push((t, b))
            t, b = relu(t)
            fen_push((t, b))
            if layer.pooled:
                t, b = maxpool2d(t, 3, 2)
                fen_push((t, b))
            feats.append(t)

        if self.variant == BASELINE:
            pooled = [feats[4]]
        else:
            pooled = [_pool_cascade(feats[li], li, fen_push) for li in range(5)]

        weights = None
        if self.has_attention:
            weighted = []
            recorded = []
            for t, can in zip(pooled, self.cans):
                rows, cols = t.data.shape[0], t.data.shape[1]
                flat, b = _reshape_step(t, (rows * cols, _CAN_UNITS))
                push((flat, b))
                omega = _can_omega(flat, can, push)
                per_map, b = _reshape_step(omega, (rows, cols))
                push((per_map, b))
                w, b = scale_channels(t, per_map)
                push((w, b))
                weighted.append(w)
                recorded.append(per_map.data.copy())
            if self.two_stream:
                weights = AttentionWeights(
                    {"prev": [r[:B] for r in recorded], "curr": [r[B:] for r in recorded]}
                )
            else:
                weights = AttentionWeights({"curr": recorded})
        else:
            weighted = pooled

        if self.two_stream:
            parts = []
            for block in (0, 1):  # previous stream first, then current
                for w in weighted:
                    p, b = _slice_rows_step(w, block * B, (block + 1) * B)
                    push((p, b))
                    parts.append(p)
        else:
            parts = weighted
        cat, b = concat_channels(parts)
        push((cat, b))

        head = self.head
        t, b = conv2d(cat, head.fuse.kernels, head.fuse.bias, 1, 0)
        push((t, b))
        t, b = batchnorm2d(t, head.bn_gamma, head.bn_beta, head.bn_state, mode)
        push((t, b))
        t, b = relu(t)
        push((t, b))
        flat, b = _reshape_step(t, (B, self.fuse_kernels * _CAN_UNITS))
        push((flat, b))
        t = flat
        for fc in (head.fc1, head.fc2):
            t, b = fully_connected(t, fc.weights, fc.bias)
            push((t, b))
            t, b = relu(t)
            push((t, b))
            t, b = dropout(t, 0.5, mode, drop_rng)
            push((t, b))
        out, b = fully_connected(t, head.fc3.weights, head.fc3.bias)
        push((out, b))

        return ForwardResult(out, weights, chain)

    def _check_patch(self, patch, name):
        if patch is None:
            raise DimensionError(f"variant {self.variant!r} requires the {name} patch")
        if patch.ndim != 4:
            raise DimensionError(f"{name} patch must be (B, 3, S, S)")
        s = self.input_size
        if patch.shape[1:] != (3, s, s):
            raise DimensionError(f"{name} patch shape {patch.shape[1:]} != (3, {s}, {s})")
        return np.ascontiguousarray(patch, dtype=np.float64)

    def named_tensors(self):
        """Deterministically ordered (name, array) pairs covering all state."""
        out = []
        for i, layer in enumerate(self.fen.layers, start=1):
            out.append((f"fen.conv{i}.kernels", layer.kernels.data))
            out.append((f"fen.conv{i}.bias", layer.bias.data))
        if self.cans:
            for i, can in enumerate(self.cans, start=1):
                out.append((f"can{i}.fc1.weights", can.fc1.weights.data))
                out.append((f"can{i}.fc1.bias", can.fc1.bias.data))
                out.append((f"can{i}.fc2.weights", can.fc2.weights.data))
                out.append((f"can{i}.fc2.bias", can.fc2.bias.data))
        h = self.head
        out.append(("head.fuse.kernels", h.fuse.kernels.data))
        out.append(("head.fuse.bias", h.fuse.bias.data))
        out.append(("head.bn.gamma", h.bn_gamma.data))
        out.append(("head.bn.beta", h.bn_beta.data))
        out.append(("head.bn.running_mean", h.bn_state.mean))
        out.append(("head.bn.running_var", h.bn_state.var))
        for i, fc in enumerate((h.fc1, h.fc2, h.fc3), start=1):
            out.append((f"head.fc{i}.weights", fc.weights.data))
            out.append((f"head.fc{i}.bias", fc.bias.data))
        out.append(("preproc.mean_rgb", self.mean_rgb))
        return out


def zero_attention_params(model):
    """Zero every CAN parameter; attention then multiplies all channels by 1.0."""
    if not model.cans:
        raise ConfigError("model has no attention networks")
    for can in model.cans:
        for p in can.params():
            p.value.data[...] = 0.0


# -- functional op surface ---------------------------------------------------

def _single_chw(patch):
    if isinstance(patch, SearchPatch):
        arr = patch.chw()
    else:
        arr = np.asarray(patch, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionError("expected one (3, S, S) patch")
    return arr[None]


def fen_forward(patch, fen):
    """Feature maps of the five levels for one patch; returns numpy arrays."""
    if isinstance(fen, TrackerModel):
        fen = fen.fen
    feats = []
    t = Tensor(_single_chw(patch))
    for layer in fen.layers:
        t, _ = conv2d(t, layer.kernels, layer.bias, layer.stride, layer.pad,
                      need_input_grad=False)
        t, _ = relu(t)
        if layer.pooled:
            t, _ = maxpool2d(t, 3, 2)
        feats.append(t)
    return [f.data[0] for f in feats]


def pool_to_common(features):
    """Max-pool the five per-level maps down to the common 6x6 size."""
    nop = lambda step: None
    out = []
    for li, f in enumerate(features):
        t = Tensor(np.asarray(f)[None])
        expected = Fen._trace_sizes(224)[li]
        if t.data.shape[2] != expected:
            raise DimensionError(
                f"level {li + 1} map is {t.data.shape[2]} wide, expected {expected}"
            )
        out.append(_pool_cascade(t, li, nop).data[0])
    return out


def can_weight(channel, can):
    """Attention weight of a single 6x6 channel."""
    arr = np.asarray(channel, dtype=np.float64)
    if arr.shape != (_COMMON_SIZE, _COMMON_SIZE):
        raise DimensionError(f"can_weight needs a 6x6 channel, got {arr.shape}")
    flat = Tensor(arr.reshape(1, _CAN_UNITS))
    nop = lambda step: None
    omega = _can_omega(flat, can, nop)
    return float(omega.data[0, 0])


def apply_attention(pooled, cans):
    """Weight each channel of each pooled level; returns (weighted, weights)."""
    nop = lambda step: None
    weighted = []
    recorded = []
    for f, can in zip(pooled, cans):
        t = Tensor(np.asarray(f)[None])
        rows, cols = t.data.shape[0], t.data.shape[1]
        flat, _ = _reshape_step(t, (rows * cols, _CAN_UNITS))
        omega = _can_omega(flat, can, nop)
        per_map, _ = _reshape_step(omega, (rows, cols))
        w, _ = scale_channels(t, per_map)
        weighted.append(w.data[0])
        recorded.append(per_map.data.copy())
    return weighted, AttentionWeights({"curr": recorded})


def model_forward(prev_patch, curr_patch, model, mode="eval", rng=None):
    """Single-pair forward; returns (encoded 3-vector, AttentionWeights or None)."""
    pv = None if prev_patch is None else _single_chw(prev_patch)
    cv = _single_chw(curr_patch)
    res = model.forward(pv, cv, mode, rng)
    return res.out.data[0].copy(), res.weights


# -- serialization ------------------------------------------------------------

MAGIC = b"AFTN1"
_VARIANT_CODES = {AFTN: 0, AFTN_NO_ATT: 1, AFTN_C: 2, BASELINE: 3}
_VARIANT_NAMES = {v: k for k, v in _VARIANT_CODES.items()}


class ModelFormatError(ValueError):
    """Model file is malformed or truncated."""


class ChecksumError(ModelFormatError):
    """Model file payload does not match its checksum."""


def save_model(model, path):
    """Write the model as float32 named tensors behind a crc32-guarded header."""
    payload = bytearray()
    cfg = model.fen_config
    payload += struct.pack("<BB", _VARIANT_CODES[model.variant], 5)
    payload += struct.pack("<5H", *cfg.channels)
    payload += struct.pack("<IB", cfg.input_size, int(cfg.frozen))
    payload += struct.pack("<II", model.fuse_kernels, model.fc_units)
    payload += struct.pack("<q", model.seed)
    named = model.named_tensors()
    payload += struct.pack("<I", len(named))
    for name, arr in named:
        nb = name.encode("ascii")
        payload += struct.pack("<H", len(nb)) + nb
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(bytes(payload))))


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4:
        raise ModelFormatError("model file truncated")
    if blob[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"bad magic {blob[:len(MAGIC)]!r}")
    payload = blob[len(MAGIC) : -4]
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError("model file checksum mismatch")

    view = memoryview(payload)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise ModelFormatError("model file truncated inside header")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    variant_code, n_levels = take("<BB")
    if variant_code not in _VARIANT_NAMES or n_levels != 5:
        raise ModelFormatError("unknown variant or level count")
    channels = take("<5H")
    input_size, frozen = take("<IB")
    fuse_kernels, fc_units = take("<II")
    (seed,) = take("<q")
    (n_tensors,) = take("<I")

    model = TrackerModel(
        _VARIANT_NAMES[variant_code],
        FenConfig(channels, input_size, bool(frozen)),
        fuse_kernels,
        fc_units,
        seed,
    )
    targets = dict(model.named_tensors())
    if n_tensors != len(targets):
        raise ModelFormatError(f"expected {len(targets)} tensors, file has {n_tensors}")
    for _ in range(n_tensors):
        (name_len,) = take("<H")
        if pos + name_len > len(view):
            raise ModelFormatError("model file truncated inside tensor name")
        name = bytes(view[pos : pos + name_len]).decode("ascii")
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        if name not in targets:
            raise ModelFormatError(f"unexpected tensor {name!r}")
        dest = targets.pop(name)
        if tuple(shape) != dest.shape:
            raise ModelFormatError(f"tensor {name!r} has shape {shape}, expected {dest.shape}")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = 4 * count
        if pos + nbytes > len(view):
            raise ModelFormatError("model file truncated inside tensor data")
        dest[...] = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += nbytes
    if targets:
        raise ModelFormatError(f"missing tensors: {sorted(targets)}")
    if pos != len(view):
        raise ModelFormatError("trailing bytes after last tensor")
    return model
