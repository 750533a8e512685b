"""Feature network, per-class linear heads, multiclass hinge loss and SGD.

Everything is plain numpy with a hand-written reverse pass.  Images enter
the network channel-major as ``(N, C, H, W)``; internally activations are
kept channels-last so convolutions reduce to one matmul over im2col rows.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str  # "conv", "pool", "dense"
    units: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    activation: str = "relu"


_TOKEN = re.compile(
    r"^(?:(?P<cn>\d+)c(?P<ck>\d+)(?:s(?P<cs>\d+))?(?:p(?P<cp>\d+))?"
    r"|p(?P<pool>\d+)"
    r"|(?P<fn>\d+)f"
    r"|(?P<ln>\d+)l)$"
)


def parse_spec(spec: str) -> tuple[Layer, ...]:
    """Parse a compact architecture string such as ``"32c5-p2-32c5-p2-256f"``.

    Tokens: ``NcK`` conv with N filters of size KxK (optional ``sS`` stride and
    ``pP`` zero padding, e.g. ``64c3p1``), ``pK`` KxK max-pooling, ``Nf`` dense
    layer with relu, ``Nl`` dense layer without activation.
    """
    layers = []
    for tok in spec.strip().split("-"):
        m = _TOKEN.match(tok.strip())
        if m is None:
            raise ValueError(f"bad layer token {tok!r} in {spec!r}")
        if m["cn"]:
            layers.append(Layer("conv", int(m["cn"]), int(m["ck"]),
                                int(m["cs"] or 1), int(m["cp"] or 0)))
        elif m["pool"]:
            layers.append(Layer("pool", kernel=int(m["pool"])))
        elif m["fn"]:
            layers.append(Layer("dense", int(m["fn"])))
        else:
            layers.append(Layer("dense", int(m["ln"]), activation="none"))
    if not layers:
        raise ValueError("empty layer spec")
    return tuple(layers)


def format_spec(layers) -> str:
    out = []
    for layer in layers:
        if layer.kind == "conv":
            tok = f"{layer.units}c{layer.kernel}"
            if layer.stride != 1:
                tok += f"s{layer.stride}"
            if layer.pad:
                tok += f"p{layer.pad}"
        elif layer.kind == "pool":
            tok = f"p{layer.kernel}"
        else:
            tok = f"{layer.units}{'f' if layer.activation == 'relu' else 'l'}"
        out.append(tok)
    return "-".join(out)


@dataclass
class ModelParams:
    """Feature network weights ``theta`` plus the class heads ``beta``.

    ``heads`` has shape ``(C, F + 1)``: the last column multiplies a constant
    unit appended to the feature vector, so no separate bias is needed.
    A model built with ``n_classes=0`` has no heads and is used as a bare
    feature or regression network (localization nets, for instance).
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    weights: dict[str, np.ndarray]
    heads: np.ndarray | None = None
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return 0 if self.heads is None else self.heads.shape[0]

    @property
    def feature_dim(self) -> int:
        return _output_shape(self.layers, self.input_shape)[-1]

    @property
    def spec(self) -> str:
        return format_spec(self.layers)

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.weights)
        if self.heads is not None:
            arrays["heads"] = self.heads
        return arrays

    def copy(self) -> "ModelParams":
        return ModelParams(self.layers, self.input_shape,
                           {k: v.copy() for k, v in self.weights.items()},
                           None if self.heads is None else self.heads.copy(),
                           self.seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.layers, self.input_shape,
                           {k: v.astype(dtype) for k, v in self.weights.items()},
                           None if self.heads is None else self.heads.astype(dtype),
                           self.seed)

    def replace(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        """Return a model with the given named arrays swapped in."""
        weights = {k: arrays.get(k, v) for k, v in self.weights.items()}
        heads = arrays.get("heads", self.heads)
        return ModelParams(self.layers, self.input_shape, weights, heads, self.seed)

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype


def _output_shape(layers, input_shape):
    c, h, w = input_shape
    shape = (h, w, c)
    for layer in layers:
        if layer.kind == "conv":
            h, w, c = shape
            k, s, p = layer.kernel, layer.stride, layer.pad
            ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if ho < 1 or wo < 1:
                raise ShapeError(f"conv {k}x{k} does not fit a {h}x{w} input")
            shape = (ho, wo, layer.units)
        elif layer.kind == "pool":
            h, w, c = shape
            k = layer.kernel
            if h < k or w < k:
                raise ShapeError(f"pool {k} does not fit a {h}x{w} input")
            shape = (h // k, w // k, c)
        else:
            shape = (layer.units,)
    return shape


def init_model(spec, input_shape, n_classes: int, seed: int = 0,
               dtype=np.float32) -> ModelParams:
    """He-initialised weights, zero biases; heads scaled by fan-in as well."""
    layers = parse_spec(spec) if isinstance(spec, str) else tuple(spec)
    input_shape = tuple(int(v) for v in input_shape)
    rng = np.random.default_rng(seed)
    weights = {}
    c, h, w = input_shape
    shape = (h, w, c)
    for i, layer in enumerate(layers):
        if layer.kind == "conv":
            fan_in = shape[2] * layer.kernel ** 2
            weights[f"l{i}.w"] = rng.standard_normal(
                (layer.units, shape[2], layer.kernel, layer.kernel)) * np.sqrt(2.0 / fan_in)
            weights[f"l{i}.b"] = np.zeros(layer.units)
        elif layer.kind == "dense":
            fan_in = int(np.prod(shape))
            weights[f"l{i}.w"] = rng.standard_normal((fan_in, layer.units)) * np.sqrt(2.0 / fan_in)
            weights[f"l{i}.b"] = np.zeros(layer.units)
        shape = _output_shape(layers[: i + 1], input_shape)
    heads = None
    if n_classes > 0:
        f = int(np.prod(shape))
        heads = np.zeros((n_classes, f + 1))
        heads[:, :f] = rng.standard_normal((n_classes, f)) * np.sqrt(1.0 / f)
    weights = {k: v.astype(dtype) for k, v in weights.items()}
    return ModelParams(layers, input_shape, weights,
                       None if heads is None else heads.astype(dtype), seed)


# --------------------------------------------------------------------------
# forward / backward


def _im2col(x, k, stride):
    # x: (N, H, W, C) -> (N, Ho, Wo, C*k*k), matching weight layout (Cout, C, k, k)
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    if stride > 1:
        win = win[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    return win.reshape(n, ho, wo, -1), ho, wo


def features_forward(params: ModelParams, images):
    """Run the feature network.

    Returns ``(features, cache)`` where ``features`` has shape ``(N, F)``.
    """
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != params.input_shape:
        raise ShapeError(f"expected input {params.input_shape}, got {tuple(x.shape[1:])}")
    x = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=params.dtype)
    cache = []
    for i, layer in enumerate(params.layers):
        if layer.kind == "conv":
            if layer.pad:
                p = layer.pad
                x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
            cols, ho, wo = _im2col(x, layer.kernel, layer.stride)
            wmat = params.weights[f"l{i}.w"].reshape(layer.units, -1)
            out = cols.reshape(-1, cols.shape[-1]) @ wmat.T
            out += params.weights[f"l{i}.b"]
            out = out.reshape(x.shape[0], ho, wo, layer.units)
            cache.append((cols, x.shape))
        elif layer.kind == "pool":
            k = layer.kernel
            n, h, w, c = x.shape
            hh, ww = h // k, w // k
            xc = x[:, : hh * k, : ww * k]
            blocks = xc.reshape(n, hh, k, ww, k, c)
            out = blocks.max(axis=(2, 4))
            cache.append((blocks, out, x.shape))
        else:
            flat = x.reshape(x.shape[0], -1)
            out = flat @ params.weights[f"l{i}.w"] + params.weights[f"l{i}.b"]
            cache.append((flat, x.shape))
        if layer.kind != "pool" and layer.activation == "relu":
            out = np.maximum(out, 0)
            cache[-1] = cache[-1] + (out,)
        x = out
    return x.reshape(x.shape[0], -1), cache


def backward(params: ModelParams, cache, upstream, need_input_grad: bool = True,
             need_weight_grads: bool = True):
    """Reverse pass of :func:`features_forward`.

    ``upstream`` is d(objective)/d(features) with shape ``(N, F)``.  Returns
    ``(weight_grads, input_grad)``; ``input_grad`` is ``(N, C, H, W)`` or
    None when not requested, and ``weight_grads`` is empty when
    ``need_weight_grads`` is false.
    """
    g = np.asarray(upstream, dtype=params.dtype)
    grads = {}
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        entry = cache[i]
        if layer.kind != "pool" and layer.activation == "relu":
            out = entry[-1]
            g = g.reshape(out.shape) * (out > 0)
        if layer.kind == "dense":
            flat, in_shape = entry[0], entry[1]
            g = g.reshape(flat.shape[0], -1)
            if need_weight_grads:
                grads[f"l{i}.w"] = flat.T @ g
                grads[f"l{i}.b"] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = (g @ params.weights[f"l{i}.w"].T).reshape(in_shape)
        elif layer.kind == "pool":
            blocks, out, in_shape = entry
            k = layer.kernel
            n, hh, _, ww, _, c = blocks.shape
            g = g.reshape(out.shape)
            # ties between positive maxima have measure zero; tied zeros are
            # killed by the upstream relu mask
            mask = blocks == out[:, :, None, :, None, :]
            gb = mask * g[:, :, None, :, None, :]
            full = np.zeros(in_shape, dtype=g.dtype)
            full[:, : hh * k, : ww * k] = gb.reshape(n, hh * k, ww * k, c)
            g = full
        else:
            cols, in_shape = entry[0], entry[1]
            n, ho, wo, _ = g.shape
            k, s = layer.kernel, layer.stride
            g2 = g.reshape(-1, layer.units)
            if need_weight_grads:
                wshape = params.weights[f"l{i}.w"].shape
                grads[f"l{i}.w"] = (g2.T @ cols.reshape(-1, cols.shape[-1])).reshape(wshape)
                grads[f"l{i}.b"] = g2.sum(axis=0)
            if i > 0 or need_input_grad:
                wmat = params.weights[f"l{i}.w"].reshape(layer.units, -1)
                # (C, k, k) last in the column layout; bring the taps to the front
                dcols = (g2 @ wmat).reshape(n, ho, wo, in_shape[3], k, k)
                dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 1, 2, 3))
                dx = np.zeros(in_shape, dtype=g.dtype)
                for a in range(k):
                    for b in range(k):
                        dx[:, a: a + s * (ho - 1) + 1: s, b: b + s * (wo - 1) + 1: s] += dcols[a, b]
                if layer.pad:
                    p = layer.pad
                    dx = dx[:, p:-p, p:-p]
                g = dx
    dimg = None
    if need_input_grad:
        c, h, w = params.input_shape
        dimg = g.reshape(-1, h, w, c).transpose(0, 3, 1, 2)
    return grads, dimg


# --------------------------------------------------------------------------
# heads and losses


def class_scores(params: ModelParams, features):
    """Scores ``beta_j . [features, 1]`` for every class; shape ``(N, C)``."""
    beta = params.heads
    f = beta.shape[1] - 1
    return features @ beta[:, :f].T + beta[:, f]


def scores_backward(params: ModelParams, features, dscores):
    """Gradients of a score-space objective w.r.t. heads and features."""
    beta = params.heads
    f = beta.shape[1] - 1
    dheads = np.empty_like(beta)
    dheads[:, :f] = dscores.T @ features
    dheads[:, f] = dscores.sum(axis=0)
    dfeat = dscores @ beta[:, :f]
    return dheads, dfeat


def l2_norm_sq(params: ModelParams) -> float:
    return float(sum(np.sum(np.square(v, dtype=np.float64)) for v in params.named_arrays().values()))


def hinge_loss(scores, labels, lam: float = 0.0, params: ModelParams | None = None):
    """Multiclass hinge loss summed over examples.

    ``sum_i max(0, 1 + max_{j != y_i} s_ij - s_{i,y_i}) + lam * ||Theta||^2``.
    The returned gradient covers only the data term, with respect to the
    scores; the regulariser's gradient is applied by :func:`sgd_step`.
    The runner-up index is the lowest class among ties.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = scores.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("label out of range")
    rows = np.arange(n)
    target = scores[rows, labels]
    others = scores.copy()
    others[rows, labels] = -np.inf
    rival = others.argmax(axis=1) if c > 1 else np.zeros(n, dtype=np.int64)
    margin = 1.0 + (others[rows, rival] if c > 1 else -np.inf) - target
    active = margin > 0
    loss = float(np.sum(np.maximum(margin, 0.0)))  # a NaN margin must surface
    grad = np.zeros_like(scores)
    grad[rows[active], rival[active]] += 1.0
    grad[rows[active], labels[active]] -= 1.0
    if lam and params is not None:
        loss += lam * l2_norm_sq(params)
    return loss, grad


def softmax_loss(scores, labels):
    """Summed softmax cross-entropy and its gradient w.r.t. the scores."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.sum(logz - shifted[rows, labels]))
    grad = np.exp(shifted - logz[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad


def predict(params: ModelParams, images, batch_size: int = 500):
    out = []
    for start in range(0, len(images), batch_size):
        feats, _ = features_forward(params, images[start: start + batch_size])
        out.append(class_scores(params, feats).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    lam: float = 1e-4
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    margin: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.margin != 1.0:
            raise ValueError("the hinge margin is fixed at 1")


@dataclass
class Momentum:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: ModelParams, grads: dict, config: TrainConfig,
             state: Momentum | None = None) -> ModelParams:
    """One momentum step ``v <- mu v - lr (g + 2 lam w)``, ``w <- w + v``.

    ``grads`` holds data-term gradients only.  Arrays missing from ``grads``
    are left untouched (no decay either).
    """
    state = state if state is not None else Momentum()
    arrays = params.named_arrays()
    updated = {}
    for name, g in grads.items():
        w = arrays[name]
        step = g + (2.0 * config.lam) * w if config.lam else g
        v = state.velocity.get(name)
        v = -config.learning_rate * step if v is None else config.momentum * v - config.learning_rate * step
        state.velocity[name] = v.astype(w.dtype, copy=False)
        updated[name] = (w + state.velocity[name]).astype(w.dtype, copy=False)
    return params.replace(updated)


def hinge_step(params: ModelParams, images, labels, config: TrainConfig,
               state: Momentum):
    """Forward, hinge loss, backward and one SGD step on a mini-batch."""
    feats, cache = features_forward(params, images)
    scores = class_scores(params, feats)
    loss, dscores = hinge_loss(scores, labels, config.lam, params)
    # the loss is a sum over examples; steps use the batch-mean data gradient
    dheads, dfeat = scores_backward(params, feats, dscores / len(labels))
    grads, _ = backward(params, cache, dfeat, need_input_grad=False)
    grads["heads"] = dheads
    return sgd_step(params, grads, config, state), loss, scores


def train_hinge(params: ModelParams, images, labels, config: TrainConfig,
                history: list | None = None) -> ModelParams:
    """Plain (no latent) hinge-loss training with shuffled mini-batches."""
    rng = np.random.default_rng(config.seed)
    state = Momentum()
    n = len(labels)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, wrong = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            params, loss, scores = hinge_step(params, images[idx], labels[idx], config, state)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            total += loss
            wrong += int(np.sum(scores.argmax(axis=1) != labels[idx]))
        if history is not None:
            history.append({"epoch": epoch, "phase": "hinge", "loss": total,
                            "train_error": wrong / max(n, 1)})
    return params


def pretrain(ds, spec, config: TrainConfig, n_classes: int | None = None,
             history: list | None = None) -> ModelParams:
    """Train the initial upright classifier that seeds the deformable stages."""
    n_classes = n_classes or int(ds.labels.max()) + 1
    params = init_model(spec, ds.images.shape[1:], n_classes, seed=config.seed)
    return train_hinge(params, ds.images, ds.labels, config, history)
