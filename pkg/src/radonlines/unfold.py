"""Deep-unfolded ADMM network for Radon-domain line recovery.

Each layer mirrors one ADMM iteration: the quadratic update is replaced
by a trainable 3-layer convolutional block acting on the 3-channel stack
[project(y), x, z] in the Radon domain, followed by soft thresholding and
the exact dual ascent step.  The fused output image is the pixelwise
maximum over the per-layer reconstructions.

Everything here is plain numpy with hand-derived reverse-mode gradients;
convolutions are same-padded 2-D correlations evaluated via sliding
windows and tensordot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import struct
import zlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .prox import ThresholdPolicy, resolve_threshold, soft_threshold
from .radon import AngleSet, build_operator, default_angle_set, default_radii_count

CHECKPOINT_MAGIC = b"DUBL"
CHECKPOINT_VERSION = 1
MIN_LAYERS = 2
MAX_LAYERS = 10
DEFAULT_CHANNELS = 16
DEFAULT_LEAKY_SLOPE = 0.01


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or corrupted checkpoint file."""


class StaleTraceError(ValueError):
    """Trace does not match the model it is being replayed against."""


def float32_grid(a: np.ndarray) -> np.ndarray:
    """Snap to values exactly representable in float32.

    Weights live on this grid so checkpoints (stored as float32) round-trip
    bit-exactly while all arithmetic stays in float64.
    """
    return np.asarray(a, dtype=np.float32).astype(np.float64)


# --------------------------------------------------------------------------
# Convolution primitives (same padding, stride 1) and their gradients.


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Correlate (C,H,W) input with (O,C,kh,kw) kernel; odd kh, kw."""
    _, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C,H,W,kh,kw)
    out = np.tensordot(kernel, win, axes=([1, 2, 3], [0, 3, 4]))
    return out + bias[:, None, None]


def conv2d_grad_kernel(x: np.ndarray, grad_out: np.ndarray, kh: int, kw: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))  # (O,C,kh,kw)


def conv2d_grad_input(grad_out: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    _, _, kh, kw = kernel.shape
    gp = np.pad(grad_out, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(gp, (kh, kw), axis=(1, 2))  # (O,H,W,kh,kw)
    flipped = kernel[:, :, ::-1, ::-1]
    return np.tensordot(flipped, win, axes=([0, 2, 3], [0, 3, 4]))  # (C,H,W)


def leaky_relu(a: np.ndarray, slope: float) -> np.ndarray:
    return np.where(a > 0, a, slope * a)


def leaky_relu_grad(a: np.ndarray, slope: float) -> np.ndarray:
    return np.where(a > 0, 1.0, slope)


def soft_threshold_grad_operand(grad, operand, lam, policy):
    """Backward of x = S_lam(operand) where lam may itself depend on the
    operand (inf_norm_scaled policy).  Subgradient 0 at kinks."""
    active = np.abs(operand) > lam
    g_op = np.where(active, grad, 0.0)
    if policy.kind == "inf_norm_scaled" and policy.value > 0:
        sgn = np.sign(operand)
        d_lam = -float(np.sum(grad * active * sgn))
        row = int(np.argmax(np.abs(operand).sum(axis=1)))
        g_op = g_op.copy()
        g_op[row, :] += d_lam * (policy.value / operand.shape[1]) * sgn[row, :]
    return g_op


# --------------------------------------------------------------------------
# Model structure.


@dataclass
class ConvLayerWeights:
    kernel: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] % 2 == 0 \
                or self.kernel.shape[3] % 2 == 0:
            raise ValueError("kernel must be 4-D with odd spatial size")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError("bias shape must match output channels")
        if not (np.all(np.isfinite(self.kernel)) and np.all(np.isfinite(self.bias))):
            raise ValueError("weights must be finite")


@dataclass
class UnfoldedLayer:
    conv1: ConvLayerWeights  # 3 -> channels
    conv2: ConvLayerWeights  # channels -> channels
    conv3: ConvLayerWeights  # channels -> 1, linear
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    gamma: float = 1.0
    threshold: ThresholdPolicy = field(default_factory=ThresholdPolicy.inf_norm_scaled)

    def __post_init__(self):
        if self.conv1.kernel.shape[1] != 3:
            raise ValueError("conv1 must take the 3-channel [b, x, z] stack")
        if self.conv3.kernel.shape[0] != 1:
            raise ValueError("conv3 must emit a single channel")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class OperatorSpec:
    """Geometry the model was built for; enough to rebuild the operator."""

    width: int = 256
    height: int = 256
    angles: AngleSet = field(default_factory=default_angle_set)
    radii_count: int | None = None

    def resolved_radii_count(self) -> int:
        if self.radii_count is not None:
            return self.radii_count
        return default_radii_count(self.width, self.height)

    def build(self):
        return build_operator(self.width, self.height, self.angles,
                              self.resolved_radii_count())


@dataclass
class UnfoldedModel:
    layers: list
    operator_spec: OperatorSpec
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        if not (MIN_LAYERS <= len(self.layers) <= MAX_LAYERS):
            raise ValueError(
                f"layer count must be in [{MIN_LAYERS}, {MAX_LAYERS}], "
                f"got {len(self.layers)}")

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def channels(self) -> int:
        return self.layers[0].conv1.kernel.shape[0]

    def parameters(self):
        """Trainable tensors in declaration order (checkpoint order)."""
        for layer in self.layers:
            for conv in (layer.conv1, layer.conv2, layer.conv3):
                yield conv.kernel
                yield conv.bias

    def set_parameters(self, tensors):
        tensors = list(tensors)
        expected = 6 * self.layer_count
        if len(tensors) != expected:
            raise ValueError(f"expected {expected} tensors, got {len(tensors)}")
        it = iter(tensors)
        for layer in self.layers:
            for conv in (layer.conv1, layer.conv2, layer.conv3):
                k = next(it)
                b = next(it)
                if k.shape != conv.kernel.shape or b.shape != conv.bias.shape:
                    raise ValueError("tensor shape mismatch")
                conv.kernel = float32_grid(k)
                conv.bias = float32_grid(b)


@dataclass
class LayerGradients:
    conv1_kernel: np.ndarray
    conv1_bias: np.ndarray
    conv2_kernel: np.ndarray
    conv2_bias: np.ndarray
    conv3_kernel: np.ndarray
    conv3_bias: np.ndarray

    def tensors(self):
        return (self.conv1_kernel, self.conv1_bias, self.conv2_kernel,
                self.conv2_bias, self.conv3_kernel, self.conv3_bias)


@dataclass
class ModelGradients:
    layers: list

    def tensors(self):
        for layer in self.layers:
            yield from layer.tensors()

    def scaled(self, factor: float) -> "ModelGradients":
        return ModelGradients([
            LayerGradients(*(t * factor for t in lg.tensors()))
            for lg in self.layers])

    def add_(self, other: "ModelGradients"):
        for mine, theirs in zip(self.layers, other.layers):
            mine.conv1_kernel += theirs.conv1_kernel
            mine.conv1_bias += theirs.conv1_bias
            mine.conv2_kernel += theirs.conv2_kernel
            mine.conv2_bias += theirs.conv2_bias
            mine.conv3_kernel += theirs.conv3_kernel
            mine.conv3_bias += theirs.conv3_bias
        return self


def init_model(layer_count: int, channels: int = DEFAULT_CHANNELS, seed: int = 0,
               operator_spec: OperatorSpec | None = None,
               gamma: float = 1.0,
               threshold: ThresholdPolicy | None = None,
               leaky_slope: float = DEFAULT_LEAKY_SLOPE) -> UnfoldedModel:
    """Seeded fan-in-scaled uniform init, zero biases, untied layers."""
    if not (MIN_LAYERS <= layer_count <= MAX_LAYERS):
        raise ValueError(
            f"layer count must be in [{MIN_LAYERS}, {MAX_LAYERS}], got {layer_count}")
    if operator_spec is None:
        operator_spec = OperatorSpec()
    if threshold is None:
        threshold = ThresholdPolicy.inf_norm_scaled()
    rng = np.random.default_rng(seed)

    def fresh(out_ch, in_ch):
        bound = 1.0 / np.sqrt(in_ch * 9)
        kernel = float32_grid(rng.uniform(-bound, bound, (out_ch, in_ch, 3, 3)))
        return ConvLayerWeights(kernel, np.zeros(out_ch))

    layers = [
        UnfoldedLayer(fresh(channels, 3), fresh(channels, channels),
                      fresh(1, channels), leaky_slope=leaky_slope,
                      gamma=gamma, threshold=threshold)
        for _ in range(layer_count)
    ]
    return UnfoldedModel(layers, operator_spec)


# --------------------------------------------------------------------------
# Forward / backward.


@dataclass
class _LayerCache:
    stack: np.ndarray  # (3, R, A) conv input
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    u: np.ndarray
    operand: np.ndarray
    lam: float
    x: np.ndarray
    z: np.ndarray


@dataclass
class ForwardTrace:
    op: object
    b: np.ndarray
    caches: list
    recons: np.ndarray  # (K, H, W)
    fused: np.ndarray  # (H, W) pixelwise max over recons
    argmax_layer: np.ndarray  # (H, W) int, ties -> lowest layer
    layer_count: int
    channels: int

    @property
    def final_x(self) -> np.ndarray:
        return self.caches[-1].x

    def fused_sinogram(self) -> np.ndarray:
        """Pixelwise max over the per-layer Radon-domain estimates."""
        return np.max(np.stack([c.x for c in self.caches]), axis=0)


def forward(model: UnfoldedModel, op, y: np.ndarray) -> ForwardTrace:
    """Run the K unfolded layers on image y; returns the full trace."""
    y = np.asarray(y, dtype=float)
    spec = model.operator_spec
    if y.shape != (spec.height, spec.width):
        raise ValueError(f"image shape {y.shape} does not match model spec "
                         f"({spec.height}, {spec.width})")
    if op.image_shape != (spec.height, spec.width) \
            or op.sinogram_shape[1] != len(spec.angles):
        raise ValueError("operator geometry does not match model spec")

    b = op.project(y)
    x = np.zeros(op.sinogram_shape)
    z = np.zeros(op.sinogram_shape)
    caches = []
    recons = []
    for layer in model.layers:
        stack = np.stack([b, x, z])
        a1 = conv2d(stack, layer.conv1.kernel, layer.conv1.bias)
        h1 = leaky_relu(a1, layer.leaky_slope)
        a2 = conv2d(h1, layer.conv2.kernel, layer.conv2.bias)
        h2 = leaky_relu(a2, layer.leaky_slope)
        u = conv2d(h2, layer.conv3.kernel, layer.conv3.bias)[0]
        operand = u + z / layer.gamma
        lam = resolve_threshold(layer.threshold, operand)
        x_new = soft_threshold(operand, lam)
        z_new = z + layer.gamma * (u - x_new)
        caches.append(_LayerCache(stack, a1, h1, a2, h2, u, operand, lam,
                                  x_new, z_new))
        recons.append(op.synthesize(x_new))
        x, z = x_new, z_new

    recons = np.stack(recons)
    fused = recons.max(axis=0)
    argmax_layer = recons.argmax(axis=0)  # first max wins on ties
    return ForwardTrace(op, b, caches, recons, fused, argmax_layer,
                        model.layer_count, model.channels)


def backward(model: UnfoldedModel, trace: ForwardTrace,
             grad_output: np.ndarray) -> ModelGradients:
    """Exact reverse-mode gradients of <grad_output, fused> w.r.t. weights.

    grad_output is an image-shaped sensitivity; the max fusion routes it to
    the argmax layer (lowest index on ties), then each layer's dual step,
    soft threshold (including the data-dependent threshold), conv stack and
    the linear Radon maps are differentiated in turn.
    """
    if trace.layer_count != model.layer_count or trace.channels != model.channels:
        raise StaleTraceError("trace layer/channel structure does not match model")
    spec = model.operator_spec
    expected_sino = (spec.resolved_radii_count(), len(spec.angles))
    if trace.caches[0].x.shape != expected_sino:
        raise StaleTraceError(
            f"trace sinogram shape {trace.caches[0].x.shape} does not match "
            f"model spec {expected_sino}")
    grad_output = np.asarray(grad_output, dtype=float)
    if grad_output.shape != trace.fused.shape:
        raise StaleTraceError(
            f"grad_output shape {grad_output.shape} does not match fused "
            f"output {trace.fused.shape}")
    op = trace.op
    sino_shape = trace.caches[0].x.shape

    gx_next = np.zeros(sino_shape)  # dL/dx^k flowing from layer k+1
    gz_next = np.zeros(sino_shape)  # dL/dz^k flowing from layer k+1
    grads = [None] * model.layer_count
    for k in range(model.layer_count - 1, -1, -1):
        layer = model.layers[k]
        cache = trace.caches[k]
        g_recon = np.where(trace.argmax_layer == k, grad_output, 0.0)
        gx = gx_next + op.project(g_recon)  # adjoint of synthesize
        gz = gz_next

        # z_new = z_prev + gamma * (u - x_new)
        gu = layer.gamma * gz
        gx = gx - layer.gamma * gz
        gz_prev = gz.copy()

        # x_new = S_lam(u + z_prev / gamma), lam possibly data-dependent
        g_operand = soft_threshold_grad_operand(gx, cache.operand, cache.lam,
                                                layer.threshold)
        gu = gu + g_operand
        gz_prev = gz_prev + g_operand / layer.gamma

        # u = conv3(h2); h2 = lrelu(conv2(h1)); h1 = lrelu(conv1(stack))
        g_a3 = gu[None]
        gk3 = conv2d_grad_kernel(cache.h2, g_a3, 3, 3)
        gb3 = g_a3.sum(axis=(1, 2))
        g_h2 = conv2d_grad_input(g_a3, layer.conv3.kernel)
        g_a2 = g_h2 * leaky_relu_grad(cache.a2, layer.leaky_slope)
        gk2 = conv2d_grad_kernel(cache.h1, g_a2, 3, 3)
        gb2 = g_a2.sum(axis=(1, 2))
        g_h1 = conv2d_grad_input(g_a2, layer.conv2.kernel)
        g_a1 = g_h1 * leaky_relu_grad(cache.a1, layer.leaky_slope)
        gk1 = conv2d_grad_kernel(cache.stack, g_a1, 3, 3)
        gb1 = g_a1.sum(axis=(1, 2))
        g_stack = conv2d_grad_input(g_a1, layer.conv1.kernel)

        grads[k] = LayerGradients(gk1, gb1, gk2, gb2, gk3, gb3)
        gx_next = g_stack[1]
        gz_next = gz_prev + g_stack[2]
    return ModelGradients(grads)


# --------------------------------------------------------------------------
# Checkpoint serialization.


def _header_dict(model: UnfoldedModel) -> dict:
    spec = model.operator_spec
    layer = model.layers[0]
    return {
        "layer_count": model.layer_count,
        "channels": model.channels,
        "width": spec.width,
        "height": spec.height,
        "angles": list(spec.angles.angles),
        "angle_step": spec.angles.step,
        "radii_count": spec.resolved_radii_count(),
        "gamma": layer.gamma,
        "leaky_slope": layer.leaky_slope,
        "threshold": {"kind": layer.threshold.kind, "value": layer.threshold.value},
    }


def save_checkpoint(model: UnfoldedModel, path) -> None:
    header = json.dumps(_header_dict(model), sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes() for p in model.parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def _tensor_shapes(layer_count: int, channels: int):
    shapes = []
    for _ in range(layer_count):
        shapes += [(channels, 3, 3, 3), (channels,),
                   (channels, channels, 3, 3), (channels,),
                   (1, channels, 3, 3), (1,)]
    return shapes


def load_checkpoint(path) -> UnfoldedModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    (header_len,) = struct.unpack_from("<I", data, 8)
    header_end = 12 + header_len
    if len(data) < header_end:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc

    layer_count = header["layer_count"]
    channels = header["channels"]
    shapes = _tensor_shapes(layer_count, channels)
    payload_len = sum(int(np.prod(s)) for s in shapes) * 4
    expected_len = header_end + payload_len + 4
    if len(data) != expected_len:
        raise CheckpointError(
            f"truncated or oversized checkpoint ({len(data)} bytes, "
            f"expected {expected_len})")
    payload = data[header_end:header_end + payload_len]
    (crc_stored,) = struct.unpack_from("<I", data, header_end + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checkpoint payload failed checksum")

    tensors = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors.append(float32_grid(arr.reshape(shape)))
        offset += count * 4

    spec = OperatorSpec(
        width=header["width"], height=header["height"],
        angles=AngleSet(tuple(header["angles"]), header["angle_step"]),
        radii_count=header["radii_count"])
    policy = ThresholdPolicy(header["threshold"]["kind"], header["threshold"]["value"])
    layers = []
    it = iter(tensors)
    for _ in range(layer_count):
        convs = [ConvLayerWeights(next(it), next(it)) for _ in range(3)]
        layers.append(UnfoldedLayer(*convs, leaky_slope=header["leaky_slope"],
                                    gamma=header["gamma"], threshold=policy))
    return UnfoldedModel(layers, spec, version=version)
