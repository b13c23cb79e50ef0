"""U-Net shaped keypoint heatmap network with hand-written backward pass.

Layout for ``depth`` levels::

    enc[l]:  conv3x3 + ReLU  (kept as skip s[l]) -> maxpool2      l = 0..depth-1
    mid:     conv3x3 + ReLU
    res[k]:  y = ReLU(x + conv(ReLU(conv(x))))                     k = 0..blocks-1
    dec[l]:  upsample2 -> concat(s[l]) -> conv3x3 + ReLU          l = depth-1..0
    head:    conv1x1 -> sigmoid

Channels double at each level: level ``l`` carries ``base_channels * 2**l``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import NumericalError, ShapeError
from . import layers as L


@dataclass(frozen=True)
class ModelSpec:
    input_channels: int = 3
    base_channels: int = 16
    depth: int = 3
    bottleneck_blocks: int = 2
    output_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.bottleneck_blocks < 0:
            raise ValueError(f"invalid ModelSpec {self}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def check_input(self, shape) -> None:
        if len(shape) != 4 or shape[1] != self.input_channels:
            raise ShapeError(f"model expects (N, {self.input_channels}, H, W), got {shape}")
        step = 2 ** self.depth
        if shape[2] % step or shape[3] % step:
            raise ShapeError(
                f"spatial size {shape[2]}x{shape[3]} not divisible by 2**depth = {step}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable array."""
    k = spec.kernel_size
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, ksize=k):
        shapes[f"{name}.w"] = (cout, cin, ksize, ksize)
        shapes[f"{name}.b"] = (cout,)

    cin = spec.input_channels
    for lvl in range(spec.depth):
        conv(f"enc{lvl}", cin, spec.channels(lvl))
        cin = spec.channels(lvl)
    cmid = spec.channels(spec.depth)
    conv("mid", cin, cmid)
    for blk in range(spec.bottleneck_blocks):
        conv(f"res{blk}.a", cmid, cmid)
        conv(f"res{blk}.b", cmid, cmid)
    cin = cmid
    for lvl in reversed(range(spec.depth)):
        conv(f"dec{lvl}", cin + spec.channels(lvl), spec.channels(lvl))
        cin = spec.channels(lvl)
    conv("head", cin, spec.output_channels, ksize=1)
    return shapes


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Kaiming fan-in normal init for kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        gain = 1.0 if name.startswith("head") else 2.0
        params[name] = (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)
    return params


class KeypointNet:
    """Holds parameters and the activation tape of the last training forward."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed)
        expected = param_shapes(spec)
        if list(self.params) != list(expected):
            raise ShapeError("parameter names do not match the model spec")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.params[name].shape}")
        self._tape = None

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def _conv(self, name, x, tape):
        out, cache = L.conv2d_forward(x, self.params[f"{name}.w"], self.params[f"{name}.b"])
        if tape is not None:
            tape[name] = cache
        return out

    def forward(self, x: np.ndarray, keep_tape: bool = False) -> np.ndarray:
        """Maps images (N, 3, H, W) in [0, 1] to heatmaps (N, 1, H, W) in (0, 1)."""
        spec = self.spec
        spec.check_input(x.shape)
        x = np.asarray(x, dtype=self.dtype)
        tape: dict | None = {} if keep_tape else None

        skips = []
        h = x
        for lvl in range(spec.depth):
            h, r = L.relu_forward(self._conv(f"enc{lvl}", h, tape))
            skips.append(h)
            h, p = L.maxpool2_forward(h)
            if tape is not None:
                tape[f"enc{lvl}.relu"] = r
                tape[f"enc{lvl}.pool"] = p

        h, r = L.relu_forward(self._conv("mid", h, tape))
        if tape is not None:
            tape["mid.relu"] = r
        for blk in range(spec.bottleneck_blocks):
            a, ra = L.relu_forward(self._conv(f"res{blk}.a", h, tape))
            s, _ = L.residual_add_forward(h, self._conv(f"res{blk}.b", a, tape))
            h, rs = L.relu_forward(s)
            if tape is not None:
                tape[f"res{blk}.relu_a"] = ra
                tape[f"res{blk}.relu_out"] = rs

        for lvl in reversed(range(spec.depth)):
            up, _ = L.bilinear_upsample2_forward(h)
            cat, split = L.concat_forward(up, skips[lvl])
            h, r = L.relu_forward(self._conv(f"dec{lvl}", cat, tape))
            if tape is not None:
                tape[f"dec{lvl}.split"] = split
                tape[f"dec{lvl}.relu"] = r

        out, sig = L.sigmoid_forward(self._conv("head", h, tape))
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite values in model output")
        if tape is not None:
            tape["head.sigmoid"] = sig
            self._tape = tape
        return out

    __call__ = forward

    def backward(self, dout: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter given d(loss)/d(output)."""
        if self._tape is None:
            raise RuntimeError("backward() needs a preceding forward(keep_tape=True)")
        spec, tape = self.spec, self._tape
        grads: dict[str, np.ndarray] = {}

        def conv_back(name, d):
            dx, grads[f"{name}.w"], grads[f"{name}.b"] = L.conv2d_backward(d, tape[name])
            return dx

        d = L.sigmoid_backward(dout, tape["head.sigmoid"])
        d = conv_back("head", d)

        dskips = [None] * spec.depth
        for lvl in range(spec.depth):
            d = L.relu_backward(d, tape[f"dec{lvl}.relu"])
            d = conv_back(f"dec{lvl}", d)
            dup, dskips[lvl] = L.concat_backward(d, tape[f"dec{lvl}.split"])
            d = L.bilinear_upsample2_backward(dup)

        for blk in reversed(range(spec.bottleneck_blocks)):
            d = L.relu_backward(d, tape[f"res{blk}.relu_out"])
            d_skip, d_branch = L.residual_add_backward(d)
            d_branch = conv_back(f"res{blk}.b", d_branch)
            d_branch = L.relu_backward(d_branch, tape[f"res{blk}.relu_a"])
            d = d_skip + conv_back(f"res{blk}.a", d_branch)
        d = L.relu_backward(d, tape["mid.relu"])
        d = conv_back("mid", d)

        for lvl in reversed(range(spec.depth)):
            d = L.maxpool2_backward(d, tape[f"enc{lvl}.pool"]) + dskips[lvl]
            d = L.relu_backward(d, tape[f"enc{lvl}.relu"])
            d = conv_back(f"enc{lvl}", d)

        self._tape = None
        return {name: grads[name] for name in self.params}
