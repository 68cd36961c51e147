"""Three-conv / two-dense image classifier written directly in numpy.

Layout of the network (channel-last tensors, VALID padding, stride 1 convs)::

    conv3x3(32) -> relu -> maxpool2
    conv3x3(32) -> relu -> maxpool2
    conv3x3(64) -> relu -> maxpool2      (pool3: 62x62x64 for a 512 input)
    dense(128)  -> relu -> dropout
    dense(n_classes) -> softmax

Gradients are exact reverse-mode derivatives through a recorded forward
trace.  Training uses Adam, L2 on both dense weight matrices and early
stopping on validation cross-entropy.
"""

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import _kernels
from ._io import write_bytes_atomic
from .errors import (
    ChecksumMismatch,
    EmptyTrainingSet,
    FormatError,
    ShapeMismatch,
    TraceMismatch,
    VersionMismatch,
)

CONV_FILTERS = (32, 32, 64)
FC_UNITS = 128
KERNEL = 3
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
               "fc1_w", "fc1_b", "fc2_w", "fc2_b")
EVAL_CHUNK = 32


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta_l2: float = 0.01
    keep_prob: float = 0.75
    batch_size: int = 29
    max_epochs: int = 300
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def conv_side(n: int) -> int:
    return n - (KERNEL - 1)


def pool_side(n: int) -> int:
    return (n - 2) // 2 + 1


def feature_sides(input_side: int) -> List[int]:
    """Spatial side after each of conv1, pool1, conv2, pool2, conv3, pool3."""
    sides, n = [], input_side
    for _ in range(3):
        n = conv_side(n)
        sides.append(n)
        n = pool_side(n)
        sides.append(n)
    return sides


@dataclass
class CnnModel:
    input_side: int
    channels: int
    n_classes: int
    params: Dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.params["fc1_w"].dtype

    @property
    def pool3_side(self) -> int:
        return feature_sides(self.input_side)[-1]

    def copy(self) -> "CnnModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "CnnModel":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return model_shapes(self.input_side, self.channels, self.n_classes)


def model_shapes(input_side: int, channels: int, n_classes: int) -> Dict[str, Tuple[int, ...]]:
    s3 = feature_sides(input_side)[-1]
    c1, c2, c3 = CONV_FILTERS
    return {
        "conv1_w": (KERNEL, KERNEL, channels, c1), "conv1_b": (c1,),
        "conv2_w": (KERNEL, KERNEL, c1, c2), "conv2_b": (c2,),
        "conv3_w": (KERNEL, KERNEL, c2, c3), "conv3_b": (c3,),
        "fc1_w": (s3 * s3 * c3, FC_UNITS), "fc1_b": (FC_UNITS,),
        "fc2_w": (FC_UNITS, n_classes), "fc2_b": (n_classes,),
    }


def init_model(input_side: int, channels: int, n_classes: int, seed: int = 0,
               dtype=np.float64) -> CnnModel:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    if min(feature_sides(input_side)) < 1:
        raise ShapeMismatch(f"input side {input_side} is too small for three conv/pool stages")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in model_shapes(input_side, channels, n_classes).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return CnnModel(input_side, channels, n_classes, params)


# ---------------------------------------------------------------------------
# layers

def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected H x W x C or N x H x W x C, got shape {x.shape}")
    return x, False


class _Workspace:
    """Scratch arrays keyed by name and shape, reused from batch to batch.

    Large per-batch temporaries otherwise go through fresh mmap'd pages on
    every step, which costs more than the arithmetic on one core.
    """

    def __init__(self):
        self._bufs = {}

    def get(self, name, shape, dtype):
        key = (name, tuple(shape), np.dtype(dtype))
        buf = self._bufs.get(key)
        if buf is None:
            buf = self._bufs[key] = np.empty(shape, dtype=dtype)
        return buf


def _buffer(ws, name, shape, dtype):
    return np.empty(shape, dtype=dtype) if ws is None else ws.get(name, shape, dtype)


def _im2col(x: np.ndarray, ws=None, name="cols") -> np.ndarray:
    """(N, H, W, C) -> (N, H-2, W-2, 9C), window offsets outer, channel inner."""
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    return _kernels.im2col3(x, _buffer(ws, name, (n, h - 2, w - 2, 9 * c), x.dtype))


def conv2d_valid(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, return_cols: bool = False,
                 _ws=None, _name="conv"):
    """3x3 cross-correlation, stride 1, no padding."""
    xb, single = _as_batch(np.asarray(x))
    if kernels.shape[:2] != (KERNEL, KERNEL) or kernels.shape[2] != xb.shape[3]:
        raise ShapeMismatch(f"kernels {kernels.shape} do not fit input channels {xb.shape[3]}")
    if bias.shape != (kernels.shape[3],):
        raise ShapeMismatch("bias length must equal the number of kernels")
    if xb.shape[1] < KERNEL or xb.shape[2] < KERNEL:
        raise ShapeMismatch(f"input {xb.shape[1]}x{xb.shape[2]} smaller than the kernel")
    cols = _im2col(xb, _ws, _name + ".cols")
    wmat = kernels.reshape(-1, kernels.shape[3])
    dtype = np.result_type(cols, wmat, bias)
    out = _buffer(_ws, _name + ".z", cols.shape[:3] + (wmat.shape[1],), dtype)
    # one 2-D GEMM; a 4-D operand would be split into many small ones
    np.matmul(cols.reshape(-1, wmat.shape[0]), wmat, out=out.reshape(-1, wmat.shape[1]))
    out += bias
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def _pool_conv_backward(dq, arg, cols, kernels, need_dx: bool, ws=None, name="conv"):
    """Gradients of a conv -> max-pool block given the pooled-output gradient."""
    cout = kernels.shape[3]
    n, h, w, cin = cols.shape[0], cols.shape[1] + 2, cols.shape[2] + 2, kernels.shape[2]
    wt = np.ascontiguousarray(kernels.reshape(-1, cout).T)
    dwt = _buffer(ws, name + ".dwt", wt.shape, kernels.dtype)
    db = _buffer(ws, name + ".db", (cout,), kernels.dtype)
    dx = _buffer(ws, name + ".dx", (n, h, w, cin) if need_dx else (0, 0, 0, cin), kernels.dtype)
    _kernels.pool_conv_bwd(np.ascontiguousarray(dq), arg, cols, wt, dwt, db, dx, need_dx)
    return (dx if need_dx else None), dwt.T.reshape(kernels.shape).copy(), db.copy()


def maxpool2(x: np.ndarray, _ws=None, _name="pool"):
    """2x2 max pooling, stride 2, VALID.

    Returns ``(pooled, argmax)`` where argmax codes the winning window cell
    as 0..3 in row-major order; ties go to the first cell.
    """
    xb, single = _as_batch(np.asarray(x))
    n, h, w, c = xb.shape
    if h < 2 or w < 2:
        raise ShapeMismatch(f"input {h}x{w} too small for 2x2 pooling")
    shape = (n, h // 2, w // 2, c)
    out, arg = _kernels.maxpool2_fwd(np.ascontiguousarray(xb), _buffer(_ws, _name + ".q", shape, xb.dtype),
                                     _buffer(_ws, _name + ".arg", shape, np.int8))
    if single:
        return out[0], arg[0]
    return out, arg


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# forward / backward

def _check_batch(model: CnnModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim == 3:
        batch = batch[None]
    expected = (model.input_side, model.input_side, model.channels)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeMismatch(f"batch shape {batch.shape} does not match model input {expected}")
    return batch.astype(model.dtype, copy=False)


def forward(model: CnnModel, batch: np.ndarray, mode: str = "eval", seed=None, keep_prob: float = 0.75,
            workspace=None):
    """Run the network; returns ``(logits, probabilities, trace)``.

    ``mode="train"`` applies inverted dropout after fc1 with a mask drawn
    from ``seed`` (an int or a numpy Generator).  Eval mode is deterministic.
    With a ``workspace`` the trace points into reused buffers and is only
    valid until the next call sharing it.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    p = model.params
    x = _check_batch(model, batch)
    trace = {"x": x, "mode": mode}
    h = x
    for layer in (1, 2, 3):
        z, cols = conv2d_valid(h, p[f"conv{layer}_w"], p[f"conv{layer}_b"], return_cols=True,
                               _ws=workspace, _name=f"conv{layer}")
        # relu and max commute, so pool first and rectify the smaller tensor
        q, arg = maxpool2(z, workspace, f"pool{layer}")
        h = np.maximum(q, 0)
        trace[f"cols{layer}"] = cols
        trace[f"q{layer}"] = q
        trace[f"arg{layer}"] = arg
    trace["pool3"] = h
    flat = h.reshape(h.shape[0], -1)
    z4 = flat @ p["fc1_w"] + p["fc1_b"]
    a4 = np.maximum(z4, 0)
    if mode == "train" and keep_prob < 1.0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        mask = (rng.random(a4.shape) < keep_prob).astype(model.dtype) / model.dtype.type(keep_prob)
    else:
        mask = np.ones_like(a4)
    d4 = a4 * mask
    logits = d4 @ p["fc2_w"] + p["fc2_b"]
    probs = softmax(logits)
    trace.update(flat=flat, z4=z4, mask=mask, d4=d4, logits=logits, probs=probs)
    return logits, probs, trace


def l2_penalty(model: CnnModel, beta_l2: float) -> float:
    p = model.params
    return float(beta_l2 * (np.sum(p["fc1_w"] ** 2) + np.sum(p["fc2_w"] ** 2)))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.intp)
    logp = _log_softmax(logits)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def loss_and_gradients(model: CnnModel, batch: np.ndarray, labels, trace: dict,
                       beta_l2: float = 0.01, workspace=None):
    """Mean cross-entropy + ``beta_l2 * (|fc1_w|^2 + |fc2_w|^2)`` and its exact gradient."""
    labels = np.asarray(labels, dtype=np.intp)
    x = _check_batch(model, batch)
    if trace.get("x") is None or trace["x"].shape != x.shape or not np.array_equal(trace["x"], x):
        raise TraceMismatch("trace was not recorded on this batch")
    if labels.shape != (x.shape[0],):
        raise TraceMismatch(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {x.shape[0]}")
    p = model.params
    n = x.shape[0]
    logits = trace["logits"]
    loss = cross_entropy(logits, labels) + l2_penalty(model, beta_l2)

    g = {}
    dlogits = trace["probs"].copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    g["fc2_w"] = trace["d4"].T @ dlogits + 2 * beta_l2 * p["fc2_w"]
    g["fc2_b"] = dlogits.sum(axis=0)
    dz4 = (dlogits @ p["fc2_w"].T) * trace["mask"] * (trace["z4"] > 0)
    g["fc1_w"] = trace["flat"].T @ dz4 + 2 * beta_l2 * p["fc1_w"]
    g["fc1_b"] = dz4.sum(axis=0)
    dh = (dz4 @ p["fc1_w"].T).reshape(trace["pool3"].shape)

    for layer in (3, 2, 1):
        dq = dh * (trace[f"q{layer}"] > 0)
        dh, g[f"conv{layer}_w"], g[f"conv{layer}_b"] = _pool_conv_backward(
            dq, trace[f"arg{layer}"], trace[f"cols{layer}"], p[f"conv{layer}_w"], layer > 1,
            workspace, f"conv{layer}")
    return loss, {k: g[k] for k in PARAM_NAMES}


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})

    def copy(self) -> "AdamState":
        return AdamState(self.t, {k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()})


def adam_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
                t: int, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8):
    """One bias-corrected Adam step; returns new ``(params, state)``, inputs untouched."""
    if t < 1:
        raise ValueError("Adam step t must be >= 1")
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, w in params.items():
        gk = grads[k]
        m = beta1 * state.m.get(k, 0.0) + (1 - beta1) * gk
        v = beta2 * state.v.get(k, 0.0) + (1 - beta2) * gk * gk
        new_m[k] = np.asarray(m, dtype=w.dtype)
        new_v[k] = np.asarray(v, dtype=w.dtype)
        new_p[k] = (w - lr * (new_m[k] / c1) / (np.sqrt(new_v[k] / c2) + eps)).astype(w.dtype)
    return new_p, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# training

def predict(model: CnnModel, images: np.ndarray, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Class probabilities, one row per image (eval mode)."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    ws = _Workspace()
    out = [forward(model, x[i:i + chunk], workspace=ws)[1] for i in range(0, x.shape[0], chunk)]
    if not out:
        return np.zeros((0, model.n_classes))
    return np.concatenate(out).astype(np.float64)


def pool3_maps(model: CnnModel, images: np.ndarray, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Eval-mode Pool3 activations, shape (N, s3, s3, 64)."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    maps = [forward(model, x[i:i + chunk])[2]["pool3"] for i in range(0, x.shape[0], chunk)]
    return np.concatenate(maps)


def evaluate(model: CnnModel, images, labels, chunk: int = EVAL_CHUNK) -> Tuple[float, float]:
    """Mean cross-entropy (no penalty) and accuracy."""
    labels = np.asarray(labels, dtype=np.intp)
    probs = predict(model, images, chunk)
    ce = float(-np.mean(np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-300, None))))
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    return ce, acc


def train(model_init: CnnModel, train_set, val_set, cfg: TrainConfig = None, verbose=None):
    """Mini-batch Adam with early stopping on validation cross-entropy.

    ``train_set`` and ``val_set`` are ``(images, integer labels)`` pairs.
    Returns the parameters of the best validation epoch, the per-epoch
    history and the optimizer state at that epoch.
    """
    cfg = cfg or TrainConfig()
    x_tr, y_tr = np.asarray(train_set[0]), np.asarray(train_set[1], dtype=np.intp)
    x_va, y_va = np.asarray(val_set[0]), np.asarray(val_set[1], dtype=np.intp)
    if len(y_tr) == 0:
        raise EmptyTrainingSet("no training samples")
    if len(y_va) == 0:
        raise EmptyTrainingSet("validation set is empty")
    _check_batch(model_init, x_tr[:1])

    rng = np.random.default_rng(cfg.seed)
    model = model_init.copy()
    state = AdamState.zeros_like(model.params)
    best, best_state, best_loss = model_init.copy(), state.copy(), np.inf
    history: List[dict] = []
    stale = 0
    n = len(y_tr)
    ws = _Workspace()
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x_tr[idx]
            _, _, trace = forward(model, xb, "train", rng, cfg.keep_prob, workspace=ws)
            loss, grads = loss_and_gradients(model, xb, y_tr[idx], trace, cfg.beta_l2, ws)
            del trace
            model.params, state = adam_update(model.params, grads, state, state.t + 1,
                                              cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss * len(idx)
        val_loss, val_acc = evaluate(model, x_va, y_va)
        history.append({"epoch": epoch + 1, "train_loss": total / n,
                        "val_loss": val_loss, "val_accuracy": val_acc})
        if verbose:
            verbose(history[-1])
        if val_loss < best_loss:
            best, best_state, best_loss = model.copy(), state.copy(), val_loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history, best_state


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"OMCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIII")  # magic, version, input_side, channels, classes, dtype bytes


def _blob(arr: np.ndarray) -> bytes:
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checkpoint_bytes(model: CnnModel, state: Optional[AdamState] = None) -> bytes:
    state = state or AdamState.zeros_like(model.params)
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.input_side, model.channels,
                               model.n_classes, model.dtype.itemsize)]
    parts.append(struct.pack("<Q", state.t))
    for name in PARAM_NAMES:
        for src in (model.params, state.m, state.v):
            arr = src.get(name)
            if arr is None:
                arr = np.zeros_like(model.params[name])
            parts.append(_blob(arr))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_save(model: CnnModel, state: Optional[AdamState], path) -> None:
    write_bytes_atomic(path, checkpoint_bytes(model, state))


def checkpoint_load(path) -> Tuple[CnnModel, AdamState]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size + 12:
        raise ChecksumMismatch(f"{path}: file too short")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch (truncated or corrupted)")
    magic, version, side, channels, classes, itemsize = _CKPT_HEADER.unpack_from(body)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    dtype = {4: np.float32, 8: np.float64}[itemsize]
    pos = _CKPT_HEADER.size
    (t,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    params, m, v = {}, {}, {}
    for name in PARAM_NAMES:
        for dest in (params, m, v):
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            dest[name] = np.frombuffer(body, "<f8", int(np.prod(shape)), pos).reshape(shape).astype(dtype)
            pos += size
    model = CnnModel(side, channels, classes, params)
    expected = model.param_shapes()
    if any(params[k].shape != expected[k] for k in PARAM_NAMES):
        raise FormatError(f"{path}: parameter shapes inconsistent with header")
    return model, AdamState(t, m, v)
