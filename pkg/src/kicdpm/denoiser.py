"""Small conditional noise predictor with hand-written reverse-mode gradients.

Architecture at channel width ``c`` on an ``(H, W)`` grid (``H``, ``W`` even
and at least 4), NHWC layout, 3x3 kernels with reflect padding, SiLU after
every block except the last::

    [x_t, y]  --in-->   h1 (H,   W,   c)
    h1        --down--> h2 (H/2, W/2, 2c)      stride-2 convolution
    h2        --mid-->  h3 (H/2, W/2, 2c)      + embedding of sqrt(psi)
    up2(h3)   --up-->   h4 (H,   W,   c)       nearest-neighbour x2, then conv
    [h4, h1]  --skip--> h5 (H,   W,   c)
    h5        --out-->  eps_hat (H, W)

The embedding is ``fc2(silu(fc1(sqrt_psi)))`` with both layers ``2c`` wide.
Tensors are stored in :data:`PARAM_ORDER`; convolution kernels have shape
``(out, in, 3, 3)`` and dense weights ``(out, in)``. The count is
``94 c^2 + 40 c + 1``.
"""

import io
import os
import struct
import tempfile

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .validation import as_generator, check_positive_int

PARAM_ORDER = (
    "in.w", "in.b", "down.w", "down.b", "mid.w", "mid.b",
    "emb1.w", "emb1.b", "emb2.w", "emb2.b",
    "up.w", "up.b", "skip.w", "skip.b", "out.w", "out.b",
)
MAGIC = b"KICDPM1"
FORMAT_VERSION = 1


def layer_shapes(width):
    """Tensor shapes in storage order for channel width ``width``."""
    c = check_positive_int(width, "width", minimum=2)
    c2 = 2 * c
    return {
        "in.w": (c, 2, 3, 3), "in.b": (c,),
        "down.w": (c2, c, 3, 3), "down.b": (c2,),
        "mid.w": (c2, c2, 3, 3), "mid.b": (c2,),
        "emb1.w": (c2, 1), "emb1.b": (c2,),
        "emb2.w": (c2, c2), "emb2.b": (c2,),
        "up.w": (c, c2, 3, 3), "up.b": (c,),
        "skip.w": (c, c2, 3, 3), "skip.b": (c,),
        "out.w": (1, c, 3, 3), "out.b": (1,),
    }


def parameter_count(width):
    """Closed form ``94 c^2 + 40 c + 1``."""
    c = check_positive_int(width, "width", minimum=2)
    return 94 * c * c + 40 * c + 1


class DenoiserParams:
    """Named float64 tensors of the noise predictor, in :data:`PARAM_ORDER`."""

    def __init__(self, width, tensors):
        self.width = check_positive_int(width, "width", minimum=2)
        shapes = layer_shapes(self.width)
        if set(tensors) != set(PARAM_ORDER):
            missing = set(PARAM_ORDER) ^ set(tensors)
            raise ValueError(f"parameter names do not match the layout: {sorted(missing)}")
        self.tensors = {}
        for name in PARAM_ORDER:
            arr = np.array(tensors[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            self.tensors[name] = arr

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return ((name, self.tensors[name]) for name in PARAM_ORDER)

    @property
    def n_params(self):
        return sum(t.size for t in self.tensors.values())

    def copy(self):
        return DenoiserParams(self.width, {k: v.copy() for k, v in self.tensors.items()})

    def to_vector(self):
        return np.concatenate([self.tensors[n].ravel() for n in PARAM_ORDER])

    @classmethod
    def from_vector(cls, width, vector):
        vector = np.asarray(vector, dtype=np.float64)
        out, pos = {}, 0
        for name, shape in layer_shapes(width).items():
            size = int(np.prod(shape))
            out[name] = vector[pos:pos + size].reshape(shape)
            pos += size
        if pos != vector.size:
            raise ValueError(f"vector has {vector.size} entries, expected {pos}")
        return cls(width, out)

    def __eq__(self, other):
        if not isinstance(other, DenoiserParams) or other.width != self.width:
            return NotImplemented if not isinstance(other, DenoiserParams) else False
        return all(np.array_equal(self.tensors[n], other.tensors[n]) for n in PARAM_ORDER)

    def __repr__(self):
        return f"DenoiserParams(width={self.width}, n_params={self.n_params})"


class GradientBuffers:
    """One gradient array per parameter tensor."""

    def __init__(self, width, tensors=None):
        self.width = width
        shapes = layer_shapes(width)
        self.tensors = {n: np.zeros(shapes[n]) for n in PARAM_ORDER}
        if tensors is not None:
            for n, g in tensors.items():
                self.tensors[n][...] = g

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return ((name, self.tensors[name]) for name in PARAM_ORDER)

    def zero(self):
        for g in self.tensors.values():
            g.fill(0.0)

    def to_vector(self):
        return np.concatenate([self.tensors[n].ravel() for n in PARAM_ORDER])

    def scaled_add(self, other, scale=1.0):
        for n in PARAM_ORDER:
            self.tensors[n] += scale * other.tensors[n]
        return self


def init_params(width=16, seed=0, zero_head=True):
    """He-uniform kernels (bound ``sqrt(6 / fan_in)``), zero biases.

    Tensors are drawn in :data:`PARAM_ORDER` from one PCG64 stream. With
    ``zero_head`` the output kernel is zero so the untrained predictor
    returns 0 everywhere; ``zero_head=False`` is meant for gradient checks.
    """
    rng = as_generator(seed)
    out = {}
    for name, shape in layer_shapes(width).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        out[name] = rng.uniform(-bound, bound, size=shape)
    if zero_head:
        out["out.w"] = np.zeros_like(out["out.w"])
    return DenoiserParams(width, out)


# ---------------------------------------------------------------- primitives

def _silu(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a))
    return a * s, s


def _silu_grad(a, s, g):
    return g * s * (1.0 + a * (1.0 - s))


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")


def _unpad(g):
    # Adjoint of reflect padding by one cell on axes 1 and 2.
    h = g[:, 1:-1].copy()
    h[:, 1] += g[:, 0]
    h[:, -2] += g[:, -1]
    w = h[:, :, 1:-1].copy()
    w[:, :, 1] += h[:, :, 0]
    w[:, :, -2] += h[:, :, -1]
    return w


def _conv(x, w, b, stride=1):
    """3x3 convolution; returns output and the im2col matrix for backward."""
    B, H, W, C = x.shape
    win = sliding_window_view(_pad(x), (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    cols = win.reshape(B * Ho * Wo, C * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(B, Ho, Wo, w.shape[0]), cols


def _conv_backward(g, cols, w, in_shape, stride=1):
    B, H, W, C = in_shape
    O = w.shape[0]
    gm = g.reshape(-1, O)
    dw = (gm.T @ cols).reshape(w.shape)
    db = gm.sum(axis=0)
    dcols = (gm @ w.reshape(O, -1)).reshape(B, g.shape[1], g.shape[2], C, 3, 3)
    dxp = np.zeros((B, H + 2, W + 2, C))
    Ho, Wo = g.shape[1], g.shape[2]
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[..., i, j]
    return _unpad(dxp), dw, db


# ------------------------------------------------------------------ network

class Activations:
    """Intermediate values recorded by :func:`forward` for :func:`backward`."""

    def __init__(self, **values):
        self.__dict__.update(values)


def _prepare(xt, cond, sqrt_psi):
    xt = np.asarray(xt, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if xt.shape != cond.shape:
        raise ValueError(f"x_t {xt.shape} and conditional {cond.shape} shapes differ")
    squeeze = xt.ndim == 2
    if squeeze:
        xt, cond = xt[None], cond[None]
    if xt.ndim != 3:
        raise ValueError(f"inputs must be (H, W) or (B, H, W), got {xt.shape}")
    B, H, W = xt.shape
    if H % 2 or W % 2 or H < 4 or W < 4:
        raise ValueError(f"spatial dims must be even and >= 4, got {H}x{W}")
    s = np.broadcast_to(np.asarray(sqrt_psi, dtype=np.float64).reshape(-1), (B,)).copy()
    return np.stack([xt, cond], axis=-1), s, squeeze


def forward(params, xt, cond, sqrt_psi, record=False):
    """Predict the noise in ``xt`` given the conditional ``cond``.

    ``xt`` and ``cond`` are ``(H, W)`` or ``(B, H, W)``; ``sqrt_psi`` is a
    scalar or a length-``B`` vector. With ``record`` returns
    ``(eps_hat, Activations)``.
    """
    p = params.tensors
    x, s, squeeze = _prepare(xt, cond, sqrt_psi)
    a1, c1 = _conv(x, p["in.w"], p["in.b"])
    h1, s1 = _silu(a1)
    a2, c2 = _conv(h1, p["down.w"], p["down.b"], stride=2)
    h2, s2 = _silu(a2)
    z1 = s[:, None] * p["emb1.w"][:, 0] + p["emb1.b"]
    e1, se = _silu(z1)
    emb = e1 @ p["emb2.w"].T + p["emb2.b"]
    a3, c3 = _conv(h2, p["mid.w"], p["mid.b"])
    a3 = a3 + emb[:, None, None, :]
    h3, s3 = _silu(a3)
    u = np.repeat(np.repeat(h3, 2, axis=1), 2, axis=2)
    a4, c4 = _conv(u, p["up.w"], p["up.b"])
    h4, s4 = _silu(a4)
    cat = np.concatenate([h4, h1], axis=-1)
    a5, c5 = _conv(cat, p["skip.w"], p["skip.b"])
    h5, s5 = _silu(a5)
    out, c6 = _conv(h5, p["out.w"], p["out.b"])
    eps = out[..., 0]
    if squeeze:
        eps = eps[0]
    if not record:
        return eps
    acts = Activations(
        squeeze=squeeze, s=s, x_shape=x.shape,
        a1=a1, s1=s1, c1=c1, h1=h1, a2=a2, s2=s2, c2=c2, h2=h2,
        z1=z1, se=se, e1=e1, a3=a3, s3=s3, c3=c3, h3=h3, u=u,
        a4=a4, s4=s4, c4=c4, h4=h4, cat=cat, a5=a5, s5=s5, c5=c5, h5=h5, c6=c6,
    )
    return eps, acts


def backward(params, acts, upstream):
    """Reverse-mode gradient of ``sum(upstream * eps_hat)`` with respect to every parameter."""
    if not isinstance(acts, Activations):
        raise RuntimeError("backward needs the activations recorded by forward(record=True)")
    p = params.tensors
    g = np.asarray(upstream, dtype=np.float64)
    if acts.squeeze:
        g = g[None]
    if g.shape != acts.x_shape[:3]:
        raise ValueError(f"upstream gradient shape {g.shape} does not match the output")
    grads = {}
    g = g[..., None]
    dh5, grads["out.w"], grads["out.b"] = _conv_backward(g, acts.c6, p["out.w"], acts.h5.shape)
    da5 = _silu_grad(acts.a5, acts.s5, dh5)
    dcat, grads["skip.w"], grads["skip.b"] = _conv_backward(
        da5, acts.c5, p["skip.w"], acts.cat.shape)
    c = params.width
    dh4, dh1 = dcat[..., :c], dcat[..., c:].copy()
    da4 = _silu_grad(acts.a4, acts.s4, dh4)
    du, grads["up.w"], grads["up.b"] = _conv_backward(da4, acts.c4, p["up.w"], acts.u.shape)
    B, Hh, Wh, C2 = acts.h3.shape
    dh3 = du.reshape(B, Hh, 2, Wh, 2, C2).sum(axis=(2, 4))
    da3 = _silu_grad(acts.a3, acts.s3, dh3)
    demb = da3.sum(axis=(1, 2))
    grads["emb2.w"] = demb.T @ acts.e1
    grads["emb2.b"] = demb.sum(axis=0)
    dz1 = _silu_grad(acts.z1, acts.se, demb @ p["emb2.w"])
    grads["emb1.w"] = (dz1.T @ acts.s)[:, None]
    grads["emb1.b"] = dz1.sum(axis=0)
    dh2, grads["mid.w"], grads["mid.b"] = _conv_backward(da3, acts.c3, p["mid.w"], acts.h2.shape)
    da2 = _silu_grad(acts.a2, acts.s2, dh2)
    dh1_down, grads["down.w"], grads["down.b"] = _conv_backward(
        da2, acts.c2, p["down.w"], acts.h1.shape, stride=2)
    dh1 += dh1_down
    da1 = _silu_grad(acts.a1, acts.s1, dh1)
    _, grads["in.w"], grads["in.b"] = _conv_backward(da1, acts.c1, p["in.w"], acts.x_shape)
    return GradientBuffers(params.width, grads)


class ConditionalDenoiser:
    """Noise predictor bound to fixed parameters; usable by the diffusion sampler.

    Batched inputs are evaluated one item at a time so that each chain's
    output is bitwise independent of which other chains share the batch
    (BLAS blocking varies with the matrix sizes).
    """

    def __init__(self, params):
        self.params = params

    def predict_noise(self, xt, cond, sqrt_psi):
        xt = np.asarray(xt, dtype=np.float64)
        if xt.ndim != 3:
            return forward(self.params, xt, cond, sqrt_psi)
        cond = np.asarray(cond, dtype=np.float64)
        s = np.broadcast_to(np.asarray(sqrt_psi, dtype=np.float64).reshape(-1), (xt.shape[0],))
        if cond.shape != xt.shape:
            raise ValueError(f"x_t {xt.shape} and conditional {cond.shape} shapes differ")
        return np.stack([forward(self.params, xt[b], cond[b], s[b]) for b in range(xt.shape[0])])

    __call__ = predict_noise


def zero_denoiser(xt, cond, sqrt_psi):
    """Predictor that always returns zero noise."""
    return np.zeros(np.shape(xt))


# ----------------------------------------------------------- gradient check

class GradCheckReport:
    """Outcome of :func:`grad_check`."""

    def __init__(self, max_rel_error, tolerance, n_checked, worst):
        self.max_rel_error = float(max_rel_error)
        self.tolerance = float(tolerance)
        self.n_checked = int(n_checked)
        self.worst = worst
        self.passed = bool(self.max_rel_error < self.tolerance)

    def __repr__(self):
        state = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({state}, max_rel_error={self.max_rel_error:.3g}, "
                f"n_checked={self.n_checked}, worst={self.worst})")


def relative_error(analytic, numeric, floor=1e-8):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero derivatives from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(params, loss_fn, grad_fn, tolerance=1e-4, n_coords=100, step=1e-5, seed=0):
    """Compare analytic and central-difference derivatives at random coordinates.

    Parameters
    ----------
    params : DenoiserParams
    loss_fn : callable
        ``loss_fn(params) -> float``.
    grad_fn : callable
        ``grad_fn(params) -> GradientBuffers``, the analytic gradient.
    tolerance : float
    n_coords : int
        Coordinates sampled uniformly without replacement over all parameters
        (every coordinate when fewer exist).
    step : float
        Central-difference step.
    seed : int

    Returns
    -------
    GradCheckReport
    """
    analytic = grad_fn(params).to_vector()
    base = params.to_vector()
    rng = as_generator(seed)
    n = min(int(n_coords), base.size)
    coords = np.sort(rng.choice(base.size, size=n, replace=False))
    names = [name for name, shape in layer_shapes(params.width).items()
             for _ in range(int(np.prod(shape)))]
    worst, worst_err = None, 0.0
    for k in coords:
        plus, minus = base.copy(), base.copy()
        plus[k] += step
        minus[k] -= step
        num = (loss_fn(DenoiserParams.from_vector(params.width, plus))
               - loss_fn(DenoiserParams.from_vector(params.width, minus))) / (2.0 * step)
        err = relative_error(analytic[k], num)
        if err >= worst_err:
            worst_err, worst = err, (names[k], int(k), float(analytic[k]), float(num))
    return GradCheckReport(worst_err, tolerance, n, worst)


# --------------------------------------------------------------- checkpoint

def _format_meta(metadata):
    lines = []
    for key in sorted(metadata):
        value = metadata[key]
        if any(ch in str(key) for ch in "=\n") or "\n" in str(value):
            raise ValueError(f"metadata entry {key!r} cannot be serialized")
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return ("\n".join(lines)).encode("utf-8")


def dumps_checkpoint(params, metadata=None):
    """Serialize parameters to bytes.

    Layout, all integers little-endian: ``KICDPM1``; u32 format version;
    u32 width; u32 metadata length and that many UTF-8 bytes of
    ``key=value`` lines; u32 tensor count; per tensor a u16 name length,
    the ASCII name, a u8 rank and u32 dims; then every tensor's values as
    little-endian float64 in the same order.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, params.width))
    meta = _format_meta(metadata or {})
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(PARAM_ORDER)))
    for name, arr in params.items():
        raw = name.encode("ascii")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in params.items():
        buf.write(arr.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def loads_checkpoint(data):
    """Inverse of :func:`dumps_checkpoint`; returns ``(params, metadata)`` with string values."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, width = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = {}
    for line in take(meta_len).decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad metadata line {line!r}")
        metadata[key] = value
    (count,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("ascii")
        (ndim,) = struct.unpack("<B", take(1))
        table.append((name, struct.unpack(f"<{ndim}I", take(4 * ndim))))
    try:
        expected = layer_shapes(width)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(str(exc)) from None
    if [n for n, _ in table] != list(PARAM_ORDER):
        raise CheckpointError("tensor table does not match the parameter layout")
    tensors = {}
    for name, shape in table:
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"{name} has shape {shape}, expected {expected[name]}")
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
    if pos != len(view):
        raise CheckpointError("trailing bytes after the last tensor")
    return DenoiserParams(width, tensors), metadata


def save_checkpoint(params, path, metadata=None):
    """Write atomically (temporary file then rename); I/O errors propagate."""
    data = dumps_checkpoint(params, metadata)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
