"""Feedforward feature extractor with a contrastive head and a cosine classifier.

Layout: ``x -> [Linear, ReLU] * n_hidden -> Linear -> F`` (features), then

* ``z = normalize(H F + c)``: unit embeddings for the contrastive loss;
* ``L = alpha * cos(F, w_j)``: scaled cosine logits against the rows of the
  classifier matrix, which is kept spectral-normalised between steps.

Gradients are written out by hand for this fixed architecture.  The
spectral-norm rescaling is a projection applied after each optimiser step,
so ``backward`` differentiates the stored classifier matrix directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import power_iteration

CHECKPOINT_SCHEMA = "odcwa.checkpoint/v1"
# enough sweeps to pin sigma to 1e-6 when the top two singular values are
# within a few percent; warm starts usually exit after a handful
SN_ITERS = 1000


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    classifier: np.ndarray
    sn_u: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[0]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        out["classifier.weight"] = self.classifier
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray], sn_u=None) -> "ModelParams":
        n = sum(1 for k in arrays if k.startswith("layer") and k.endswith(".weight"))
        return cls(
            weights=[np.asarray(arrays[f"layer{i}.weight"], dtype=np.float64) for i in range(n)],
            biases=[np.asarray(arrays[f"layer{i}.bias"], dtype=np.float64) for i in range(n)],
            head_weight=np.asarray(arrays["head.weight"], dtype=np.float64),
            head_bias=np.asarray(arrays["head.bias"], dtype=np.float64),
            classifier=np.asarray(arrays["classifier.weight"], dtype=np.float64),
            sn_u=None if sn_u is None else np.asarray(sn_u, dtype=np.float64),
        )

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        """Apply ``fn`` arraywise across this and ``others``; ``sn_u`` is carried over."""
        mine = self.named_arrays()
        theirs = [o.named_arrays() for o in others]
        out = {k: fn(v, *(t[k] for t in theirs)) for k, v in mine.items()}
        return ModelParams.from_named(out, sn_u=None if self.sn_u is None else self.sn_u.copy())

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        z = self.map(np.zeros_like)
        z.sn_u = None
        return z

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.named_arrays().values()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        out, k = {}, 0
        for name, a in self.named_arrays().items():
            out[name] = np.asarray(vec[k : k + a.size], dtype=np.float64).reshape(a.shape).copy()
            k += a.size
        if k != vec.size:
            raise ValueError("flat vector has the wrong length")
        return ModelParams.from_named(out, sn_u=self.sn_u)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    features: np.ndarray
    head_out: np.ndarray
    embeddings: np.ndarray
    logits: np.ndarray
    alpha_scale: float
    extras: dict = field(default_factory=dict)


def init_params(
    rng: np.random.Generator,
    input_dim: int = 2,
    hidden: tuple[int, ...] = (64, 64),
    feature_dim: int = 16,
    embed_dim: int = 16,
    num_classes: int = 7,
) -> ModelParams:
    """He-normal hidden layers, Glorot-normal heads, zero biases."""
    dims = [input_dim, *hidden, feature_dim]
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / din), size=(dout, din)))
        biases.append(np.zeros(dout))
    head = rng.normal(0.0, np.sqrt(2.0 / (feature_dim + embed_dim)), size=(embed_dim, feature_dim))
    clf = rng.normal(0.0, np.sqrt(2.0 / (feature_dim + num_classes)), size=(num_classes, feature_dim))
    return ModelParams(weights, biases, head, np.zeros(embed_dim), clf, sn_u=np.ones(num_classes))


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where(norms[:, None] > 0, x / safe[:, None], 0.0)
    return unit, norms


def _normalize_rows_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(x/|x|) = (g - u (u.g)) / |x|; zero-norm rows were mapped to 0 and pass no gradient
    safe = np.where(norms > 0, norms, 1.0)
    g = (grad_unit - unit * np.sum(unit * grad_unit, axis=1, keepdims=True)) / safe[:, None]
    return np.where(norms[:, None] > 0, g, 0.0)


def forward(params: ModelParams, batch: np.ndarray, alpha_scale: float = 20.0) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"batch must have shape (n, {params.input_dim}), got {x.shape}")
    pre, acts = [], [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w.T + b
        pre.append(a)
        h = a if i == last else np.maximum(a, 0.0)
        acts.append(h)
    features = h

    head_out = features @ params.head_weight.T + params.head_bias
    emb, emb_norm = _normalize_rows(head_out)

    f_unit, f_norm = _normalize_rows(features)
    w_unit, w_norm = _normalize_rows(params.classifier)
    cos = f_unit @ w_unit.T
    logits = alpha_scale * cos
    return ForwardTrace(
        inputs=x,
        pre_activations=pre,
        activations=acts,
        features=features,
        head_out=head_out,
        embeddings=emb,
        logits=logits,
        alpha_scale=float(alpha_scale),
        extras={
            "emb_norm": emb_norm,
            "f_unit": f_unit,
            "f_norm": f_norm,
            "w_unit": w_unit,
            "w_norm": w_norm,
        },
    )


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    grad_logits: np.ndarray,
    grad_embeddings: np.ndarray | None = None,
) -> ModelParams:
    """Gradient of a scalar loss with respect to every parameter.

    ``grad_logits`` (n, C) and ``grad_embeddings`` (n, E) are the loss
    gradients with respect to ``trace.logits`` and ``trace.embeddings``.
    """
    n = trace.inputs.shape[0]
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != trace.logits.shape:
        raise ValueError(f"grad_logits shape {grad_logits.shape} != logits shape {trace.logits.shape}")
    if grad_embeddings is None:
        grad_embeddings = np.zeros_like(trace.embeddings)
    grad_embeddings = np.asarray(grad_embeddings, dtype=np.float64)
    if grad_embeddings.shape != trace.embeddings.shape:
        raise ValueError("grad_embeddings shape does not match embeddings")
    ex = trace.extras

    g_cos = trace.alpha_scale * grad_logits
    g_f_unit = g_cos @ ex["w_unit"]
    g_w_unit = g_cos.T @ ex["f_unit"]
    g_classifier = _normalize_rows_backward(g_w_unit, ex["w_unit"], ex["w_norm"])
    g_features = _normalize_rows_backward(g_f_unit, ex["f_unit"], ex["f_norm"])

    g_head_out = _normalize_rows_backward(grad_embeddings, trace.embeddings, ex["emb_norm"])
    g_head_w = g_head_out.T @ trace.features
    g_head_b = g_head_out.sum(axis=0)
    g_features = g_features + g_head_out @ params.head_weight

    g_weights = [None] * len(params.weights)
    g_biases = [None] * len(params.weights)
    g = g_features
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * (trace.pre_activations[i] > 0)
        g_weights[i] = g.T @ trace.activations[i]
        g_biases[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i]
    assert g_features.shape[0] == n
    return ModelParams(g_weights, g_biases, g_head_w, g_head_b, g_classifier, sn_u=None)


def apply_spectral_norm(params: ModelParams, iters: int = SN_ITERS) -> ModelParams:
    """Rescale the classifier to ``W / max(1, sigma(W))``; warm-starts from ``sn_u``."""
    out = params.copy()
    W = out.classifier
    u0 = out.sn_u if out.sn_u is not None and np.any(out.sn_u) else np.ones(W.shape[0])
    sigma, u, _ = power_iteration(W, iters, u0)
    out.sn_u = u
    if sigma > 1.0:
        out.classifier = W / sigma
    return out


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    lr: float = 0.02,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    velocity: ModelParams | None = None,
    spectral_norm: bool = True,
    sn_iters: int = SN_ITERS,
) -> tuple[ModelParams, ModelParams]:
    """Momentum SGD with L2 weight decay, then spectral normalisation.

    ``v <- momentum * v + (g + weight_decay * theta)``, ``theta <- theta - lr * v``
    (the torch.optim.SGD convention).  Returns ``(params, velocity)``.
    """
    if velocity is None:
        velocity = params.zeros_like()
    d_p = grads.map(lambda g, p: g + weight_decay * p, params)
    new_v = velocity.map(lambda v, d: momentum * v + d, d_p)
    new_params = params.map(lambda p, v: p - lr * v, new_v)
    new_params.sn_u = None if params.sn_u is None else params.sn_u.copy()
    if spectral_norm:
        new_params = apply_spectral_norm(new_params, sn_iters)
    return new_params, new_v


def params_to_json(params: ModelParams, meta: dict | None = None) -> str:
    arrays = {
        name: {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
        for name, a in params.named_arrays().items()
    }
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "arrays": arrays,
        "sn_u": None if params.sn_u is None else [float(x) for x in params.sn_u],
        "meta": meta or {},
    }
    return json.dumps(doc, indent=1)


def params_from_json(text: str) -> ModelParams:
    doc = json.loads(text)
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    arrays = {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in doc["arrays"].items()
    }
    return ModelParams.from_named(arrays, sn_u=doc.get("sn_u"))
