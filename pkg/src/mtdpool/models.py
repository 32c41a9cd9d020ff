"""Dense feed-forward classifiers: forward pass, backprop, SGD training.

Models are immutable value objects (relu hidden layers, softmax output).
Every operation either reads a model or returns a new one, so they are
safe to share across threads.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericOverflow, RejectedInput


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Model:
    """Stack of dense layers; weights[i] has shape (out_i, in_i)."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise RejectedInput("model needs matching weight/bias lists")
        ws = tuple(_freeze(w) for w in self.weights)
        bs = tuple(_freeze(b) for b in self.biases)
        for w, b in zip(ws, bs):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise RejectedInput("layer shapes inconsistent")
        for prev, nxt in zip(ws[:-1], ws[1:]):
            if prev.shape[0] != nxt.shape[1]:
                raise RejectedInput("consecutive layer dimensions do not chain")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def dims(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def arch_id(self) -> str:
        return "dense-" + "x".join(str(d) for d in self.dims)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_model(layer_dims, seed: int) -> Model:
    """Fresh model with He-scaled Gaussian weights and zero biases."""
    if len(layer_dims) < 2:
        raise RejectedInput("need at least input and output dims")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Model(tuple(ws), tuple(bs))


def _check_finite(a: np.ndarray, what: str):
    if not np.all(np.isfinite(a)):
        raise NumericOverflow(f"non-finite values in {what}")


def _forward_pass(model: Model, x: np.ndarray):
    """Return (pre-activations, post-activations) per layer for a batch."""
    acts = [x]
    pres = []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        _check_finite(z, f"layer {i} pre-activation")
        pres.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return pres, acts


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise RejectedInput(
            f"input dimension {x.shape[-1]} does not match model input {model.input_dim}"
        )
    return x


def logits(model: Model, x: np.ndarray) -> np.ndarray:
    """Pre-softmax outputs; accepts a single vector or a batch."""
    xb = _as_batch(model, x)
    z = _forward_pass(model, xb)[0][-1]
    return z[0] if np.asarray(x).ndim == 1 else z


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Softmax class distribution for one input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise RejectedInput("forward takes a single feature vector")
    return _softmax(logits(model, x))


def predict_proba(model: Model, x: np.ndarray) -> np.ndarray:
    """Softmax class distributions for a (N, d) batch."""
    return _softmax(logits(model, _as_batch(model, x)))


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(predict_proba(model, x), axis=1)


def _backprop(model: Model, x: np.ndarray, dz_out: np.ndarray):
    """Push a gradient seed on the output logits back through the net.

    Returns ([(dW, db) per layer], dX) for the batch `x` (N, d) and seed
    `dz_out` (N, C).
    """
    pres, acts = _forward_pass(model, x)
    grads = [None] * len(model.weights)
    dz = dz_out
    for i in range(len(model.weights) - 1, -1, -1):
        grads[i] = (dz.T @ acts[i], dz.sum(axis=0))
        if i > 0:
            da = dz @ model.weights[i]
            dz = da * (pres[i - 1] > 0.0)
    dx = dz @ model.weights[0]
    return grads, dx


def _batch_loss_grads(model: Model, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch plus gradients of it."""
    z = _forward_pass(model, x)[0][-1]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + z.max(axis=1)
    losses = lse - z[np.arange(len(y)), y]
    p = _softmax(z)
    dz = p.copy()
    dz[np.arange(len(y)), y] -= 1.0
    dz /= len(y)
    grads, dx = _backprop(model, x, dz)
    return float(losses.mean()), grads, dx


def grad_loss(model: Model, x: np.ndarray, y: int):
    """Cross-entropy loss of one sample and its gradients.

    Returns (param_grads, input_grad, loss) where param_grads is a list of
    (dW, db) matching the model layers and input_grad is d(loss)/dx.
    """
    xb = _as_batch(model, x)
    if xb.shape[0] != 1:
        raise RejectedInput("grad_loss takes a single sample")
    y = int(y)
    if not 0 <= y < model.n_classes:
        raise RejectedInput(f"label {y} out of range")
    loss, grads, dx = _batch_loss_grads(model, xb, np.array([y]))
    return grads, dx[0], loss


def loss_on(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of a labelled batch."""
    return _batch_loss_grads(model, _as_batch(model, x), np.asarray(y, dtype=np.intp))[0]


def train(model: Model, data, epochs: int, lr: float, seed: int,
          batch_size: int | None = None) -> Model:
    """Plain SGD for `epochs` passes; deterministic under (inputs, seed).

    `batch_size=None` runs full-batch gradient descent (the default
    profile); otherwise minibatches are drawn in a seeded shuffle order.
    """
    if lr <= 0:
        raise RejectedInput("lr must be positive")
    if len(data.x) == 0:
        raise RejectedInput("cannot train on an empty dataset")
    if epochs == 0:
        return model
    rng = np.random.default_rng(seed)
    ws = [w.copy() for w in model.weights]
    bs = [b.copy() for b in model.biases]
    x, y = data.x, data.y.astype(np.intp)
    n = len(x)
    bsz = n if batch_size is None else min(batch_size, n)
    for _ in range(epochs):
        order = np.arange(n) if batch_size is None else rng.permutation(n)
        for start in range(0, n, bsz):
            idx = order[start:start + bsz]
            cur = Model(tuple(ws), tuple(bs))
            _, grads, _ = _batch_loss_grads(cur, x[idx], y[idx])
            for i, (dw, db) in enumerate(grads):
                ws[i] = ws[i] - lr * dw
                bs[i] = bs[i] - lr * db
    return Model(tuple(ws), tuple(bs))


def accuracy(model: Model, data) -> float:
    """Fraction of samples whose argmax prediction matches the label."""
    if len(data.x) == 0:
        raise RejectedInput("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, data.x) == data.y))


# --- model file format ------------------------------------------------
#
# Versioned flat binary: two ASCII header lines (magic+version, layer
# dims), then per layer the row-major float64 weight matrix followed by
# the float64 bias vector. Round-trips are bit-exact.

_MAGIC = b"MTDPOOL-MODEL v1"


def save_model(model: Model, path):
    with open(path, "wb") as f:
        f.write(_MAGIC + b"\n")
        f.write(" ".join(str(d) for d in model.dims).encode() + b"\n")
        for w, b in zip(model.weights, model.biases):
            f.write(w.tobytes(order="C"))
            f.write(b.tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != _MAGIC:
            raise RejectedInput(f"not a model file (header {magic!r})")
        dims = [int(t) for t in f.readline().split()]
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(f.read(8 * fan_out * fan_in), dtype=np.float64)
            ws.append(w.reshape(fan_out, fan_in))
            bs.append(np.frombuffer(f.read(8 * fan_out), dtype=np.float64))
        if f.read(1):
            raise RejectedInput("trailing bytes after model payload")
    return Model(tuple(ws), tuple(bs))
