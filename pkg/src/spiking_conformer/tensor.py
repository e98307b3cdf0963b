"""Dense numeric kernels: convolution, pooling, batch norm, and matmul.

All kernels are pure functions over float64 numpy arrays and are
deterministic for fixed inputs.  Backward passes are provided explicitly
(there is no autograd graph); each `*_backward` computes the exact adjoint
of its forward as a linear map, so they can be verified against finite
differences.

The module also defines the binary tensor container used by checkpoints
and dataset payloads (magic ``SPKT``, little-endian, float64).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

MAGIC_TENSOR = b"SPKT"
CONTAINER_VERSION = 1


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy a kernel's contract."""


class NumericError(ValueError):
    """Raised when non-finite values reach a kernel that rejects them."""


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def assert_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")


def assert_binary(x: np.ndarray, what: str = "raster") -> None:
    """Reject anything that is not an exact {0, 1} tensor."""
    bad = (x != 0.0) & (x != 1.0)
    if bad.any():
        raise NumericError(f"{what} is not binary: found value {x[bad].flat[0]!r}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvSpec:
    """Geometry of a 2-D cross-correlation."""

    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    has_bias: bool = True

    def __post_init__(self):
        if self.out_channels < 1:
            raise ShapeError("out_channels must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ShapeError("kernel and stride entries must be >= 1")
        if min(self.padding) < 0:
            raise ShapeError("padding must be >= 0")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv window {self.kernel} does not fit input ({h}, {w}) "
                f"with stride {self.stride} and padding {self.padding}"
            )
        return oh, ow


def _im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, tuple[int, int]]:
    """Gather sliding windows into a (B*OH*OW, C*kh*kw) matrix."""
    b, c, h, w = x.shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    oh, ow = spec.output_hw(h, w)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    view = view[:, :, ::sh, ::sw]  # (B, C, OH, OW, kh, kw)
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), (oh, ow)


def conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec, bias=None) -> np.ndarray:
    """Cross-correlate ``x`` (B,C,H,W) with ``w`` (O,C,kh,kw).

    Valid/zero padding and strides per ``spec``.  Raises ShapeError on a
    channel mismatch and NumericError on non-finite inputs.
    """
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weights, got {x.shape} / {w.shape}")
    b, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"input has {c} channels but weights expect {cw}")
    if (kh, kw) != spec.kernel or o != spec.out_channels:
        raise ShapeError("weights do not match ConvSpec geometry")
    assert_finite(x, "conv2d input")
    assert_finite(w, "conv2d weights")
    oh, ow = spec.output_hw(h, wd)
    sh, sw = spec.stride
    ph, pw = spec.padding

    if (kh, kw) == (1, 1) and (sh, sw) == (1, 1) and (ph, pw) == (0, 0):
        # pointwise: plain channel mixing
        out = np.matmul(w.reshape(o, c), x.reshape(b, c, h * wd))
        out = out.reshape(b, o, h, wd)
    elif kw == 1 and kh == h and (sh, sw) == (1, 1) and (ph, pw) == (0, 0):
        # full-height column contraction (electrode-collapsing spatial conv)
        out = np.matmul(w.reshape(o, c * kh), x.reshape(b, c * kh, wd))
        out = out.reshape(b, o, 1, wd)
    else:
        cols, _ = _im2col(x, spec)
        out = cols @ w.reshape(o, -1).T
        out = out.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)

    if bias is not None:
        out = out + np.asarray(bias, dtype=DTYPE).reshape(1, o, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    spec: ConvSpec,
    need_grad_input: bool = True,
):
    """Adjoints of conv2d: returns (grad_input, grad_weights, grad_bias).

    ``grad_bias`` is None when the spec carries no bias; ``grad_input`` is
    None when ``need_grad_input`` is False (first-layer shortcut).
    """
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = spec.output_hw(h, wd)
    if grad_out.shape != (b, o, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output {(b, o, oh, ow)}"
        )
    sh, sw = spec.stride
    ph, pw = spec.padding

    grad_bias = grad_out.sum(axis=(0, 2, 3)) if spec.has_bias else None

    if (kh, kw) == (1, 1) and (sh, sw) == (1, 1) and (ph, pw) == (0, 0):
        # dW[o,c] = sum_{b,n} g[b,o,n] x[b,c,n]: one (O, B*N)@(B*N, C) product
        gmat = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
        xmat = x.transpose(1, 0, 2, 3).reshape(c, -1)
        grad_w = (gmat @ xmat.T).reshape(o, c, 1, 1)
        grad_x = None
        if need_grad_input:
            grad_x = np.matmul(
                w.reshape(o, c).T, grad_out.reshape(b, o, h * wd)
            ).reshape(b, c, h, wd)
        return grad_x, grad_w, grad_bias

    if kw == 1 and kh == h and (sh, sw) == (1, 1) and (ph, pw) == (0, 0):
        gmat = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
        xmat = x.reshape(b, c * kh, wd).transpose(1, 0, 2).reshape(c * kh, -1)
        grad_w = (gmat @ xmat.T).reshape(o, c, kh, 1)
        grad_x = None
        if need_grad_input:
            grad_x = np.matmul(
                w.reshape(o, c * kh).T, grad_out.reshape(b, o, wd)
            ).reshape(b, c, h, wd)
        return grad_x, grad_w, grad_bias

    cols, _ = _im2col(x, spec)
    gmat = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = (gmat.T @ cols).reshape(o, c, kh, kw)

    grad_x = None
    if need_grad_input:
        if (sh, sw) == (1, 1):
            # grad wrt input is a full correlation with the rotated kernel
            gpad = np.pad(
                grad_out,
                ((0, 0), (0, 0), (kh - 1 - ph, kh - 1 - ph), (kw - 1 - pw, kw - 1 - pw)),
            )
            wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            back_spec = ConvSpec(c, (kh, kw), (1, 1), (0, 0), has_bias=False)
            grad_x = conv2d(gpad, np.ascontiguousarray(wflip), back_spec)
        else:
            # generic strided scatter (small shapes only)
            dcols = gmat @ w.reshape(o, -1)
            dcols = dcols.reshape(b, oh, ow, c, kh, kw)
            grad_x_pad = np.zeros((b, c, h + 2 * ph, wd + 2 * pw), dtype=DTYPE)
            for i in range(oh):
                for j in range(ow):
                    grad_x_pad[:, :, i * sh : i * sh + kh, j * sw : j * sw + kw] += (
                        dcols[:, i, j]
                    )
            grad_x = grad_x_pad[:, :, ph : ph + h, pw : pw + wd]
    return grad_x, grad_w, grad_bias


# ---------------------------------------------------------------------------
# Matmul
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product with strict batch-dimension equality (no broadcasting)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"inner dimensions disagree: {a.shape[-1]} vs {b.shape[-2]}"
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"batch dimensions must match exactly: {a.shape[:-2]} vs {b.shape[:-2]}"
        )
    return np.matmul(a, b)


# ---------------------------------------------------------------------------
# Average pooling
# ---------------------------------------------------------------------------


def avg_pool2d(
    x: np.ndarray, kernel: tuple[int, int] = (1, 64), stride: tuple[int, int] = (1, 50)
) -> np.ndarray:
    """Window means with no padding; windows may overlap (stride < kernel)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-D input, got {x.shape}")
    kh, kw = kernel
    sh, sw = stride
    b, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool window {kernel} larger than input ({h}, {w})")
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    view = view[:, :, ::sh, ::sw]
    return np.ascontiguousarray(view.mean(axis=(-2, -1)))


def avg_pool2d_backward(
    grad_out: np.ndarray,
    input_shape: tuple[int, ...],
    kernel: tuple[int, int] = (1, 64),
    stride: tuple[int, int] = (1, 50),
) -> np.ndarray:
    kh, kw = kernel
    sh, sw = stride
    b, c, h, w = input_shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    gx = np.zeros(input_shape, dtype=DTYPE)
    g = grad_out / (kh * kw)
    for i in range(oh):
        for j in range(ow):
            gx[:, :, i * sh : i * sh + kh, j * sw : j * sw + kw] += g[:, :, i : i + 1, j : j + 1]
    return gx


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel affine normalization state.

    ``gamma``/``beta`` are learnable; running statistics are updated with
    ``momentum`` in training mode and consumed in evaluation mode.  The
    running variance update uses the unbiased batch variance, while
    normalization itself uses the biased one (the usual convention).
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "training"

    def __post_init__(self):
        self.gamma = as_f64(self.gamma)
        self.beta = as_f64(self.beta)
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if self.mode not in ("training", "evaluation"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        return cls(np.ones(channels), np.zeros(channels), eps=eps, momentum=momentum)


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    # channel axis is 1; statistics pool over batch and spatial axes
    return (0,) + tuple(range(2, x.ndim))


def _bn_bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm_forward(x: np.ndarray, state: BatchNormState, update_running: bool = True):
    """Returns (out, cache); cache feeds batch_norm_backward."""
    x = np.asarray(x, dtype=DTYPE)
    c = x.shape[1]
    if state.gamma.shape[0] != c:
        raise ShapeError(f"batch norm has {state.gamma.shape[0]} channels, input has {c}")
    axes = _bn_axes(x)
    if state.mode == "training":
        n = x.size // c
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            m = state.momentum
            if state.running_mean is None:
                # conventional start: zero mean, unit variance
                state.running_mean = np.zeros_like(mean)
                state.running_var = np.ones_like(var)
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        if state.running_mean is None or state.running_var is None:
            raise ValueError("evaluation mode requires initialized running statistics")
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - _bn_bcast(mean, x.ndim)) * _bn_bcast(inv_std, x.ndim)
    out = _bn_bcast(state.gamma, x.ndim) * xhat + _bn_bcast(state.beta, x.ndim)
    cache = (xhat, inv_std, state.gamma, state.mode)
    return out, cache


def batch_norm(x: np.ndarray, state: BatchNormState) -> np.ndarray:
    out, _ = batch_norm_forward(x, state)
    return out


def batch_norm_backward(grad_out: np.ndarray, cache):
    """Returns (grad_input, grad_gamma, grad_beta).

    In training mode the gradient flows through the batch statistics; in
    evaluation mode the map is a fixed per-channel affine.
    """
    xhat, inv_std, gamma, mode = cache
    axes = _bn_axes(grad_out)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    gxhat = grad_out * _bn_bcast(gamma, grad_out.ndim)
    if mode == "evaluation":
        grad_x = gxhat * _bn_bcast(inv_std, grad_out.ndim)
        return grad_x, grad_gamma, grad_beta
    c = grad_out.shape[1]
    n = grad_out.size // c
    sum_g = gxhat.sum(axis=axes)
    sum_gx = (gxhat * xhat).sum(axis=axes)
    grad_x = (
        gxhat
        - _bn_bcast(sum_g / n, grad_out.ndim)
        - xhat * _bn_bcast(sum_gx / n, grad_out.ndim)
    ) * _bn_bcast(inv_std, grad_out.ndim)
    return grad_x, grad_gamma, grad_beta


def fold_batch_norm(w, bias, state: BatchNormState):
    """Fold an evaluation-mode batch norm into the preceding conv/linear.

    Returns (w_folded, bias_folded) such that applying them equals
    conv/linear followed by the batch norm with running statistics.
    """
    if state.running_mean is None or state.running_var is None:
        raise ValueError("cannot fold uninitialized running statistics")
    scale = state.gamma / np.sqrt(state.running_var + state.eps)
    shape = (-1,) + (1,) * (w.ndim - 1)
    w_f = w * scale.reshape(shape)
    b = np.zeros(w.shape[0], dtype=DTYPE) if bias is None else bias
    b_f = (b - state.running_mean) * scale + state.beta
    return w_f, b_f


# ---------------------------------------------------------------------------
# Tensor container serialization
# ---------------------------------------------------------------------------


def save_tensor(fp, arr: np.ndarray) -> None:
    """Write one tensor: magic, u16 version, u16 rank, u64 shape, f64 data."""
    arr = as_f64(arr)
    fp.write(MAGIC_TENSOR)
    fp.write(struct.pack("<HH", CONTAINER_VERSION, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(arr.astype("<f8").tobytes())


def load_tensor(fp) -> np.ndarray:
    magic = fp.read(4)
    if magic != MAGIC_TENSOR:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<HH", fp.read(4))
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fp.read(8 * count), dtype="<f8", count=count)
    return data.reshape(shape).astype(DTYPE)


def save_bundle(path, header: dict, entries: dict[str, np.ndarray]) -> None:
    """Named tensor bundle: key=value text header, blank line, then entries."""
    with open(path, "wb") as fp:
        for key, value in header.items():
            fp.write(f"{key}={value}\n".encode())
        fp.write(b"\n")
        fp.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            nb = name.encode()
            fp.write(struct.pack("<H", len(nb)))
            fp.write(nb)
            save_tensor(fp, arr)


def load_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fp:
        header = {}
        while True:
            line = b""
            while not line.endswith(b"\n"):
                ch = fp.read(1)
                if not ch:
                    raise ValueError("truncated bundle header")
                line += ch
            line = line[:-1]
            if not line:
                break
            key, _, value = line.decode().partition("=")
            header[key] = value
        (count,) = struct.unpack("<I", fp.read(4))
        entries = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fp.read(2))
            name = fp.read(nlen).decode()
            entries[name] = load_tensor(fp)
    return header, entries


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    save_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return load_tensor(io.BytesIO(data))
