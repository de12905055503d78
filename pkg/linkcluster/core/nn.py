# linkcluster/core/nn.py
"""
Minimal dense network engine on numpy.

Covers exactly the layer kinds the linkage predictor and the GCN head need:
Linear, BatchNorm, LeakyReLU, SELU and Dropout, with analytic backward
passes, SGD with momentum, cyclic step schedules, softmax cross-entropy,
an additive angular margin (ArcFace) head and a finite-difference checker.
Every computation is float64 and reductions run in fixed index order.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from linkcluster.core.errors import ModelError, TrainingError
from linkcluster.extensions import STREAM_DROPOUT, make_rng

logger = logging.getLogger(__name__)

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

TRAIN = "train"
EVAL = "eval"

# Layer kind codes used by checkpoints
KIND_CODES = {"linear": 0, "batchnorm": 1, "leakyrelu": 2, "selu": 3, "dropout": 4}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width_in: int = 0
    width_out: int = 0
    value: float = 0.0

    def encode(self):
        return np.array([KIND_CODES[self.kind], self.width_in, self.width_out, self.value], dtype=np.float64)

    @classmethod
    def decode(cls, row):
        kinds = {v: k for k, v in KIND_CODES.items()}
        return cls(kinds[int(row[0])], int(row[1]), int(row[2]), float(row[3]))


def kaiming_uniform(fan_in, fan_out, rng):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Layer:
    kind = ""

    def __init__(self):
        self._cache = None
        self.grads = {}

    def params(self):
        return {}

    def buffers(self):
        return {}

    def _cached(self):
        if self._cache is None:
            raise ModelError(f"{self.kind}: backward called without a cached forward")
        return self._cache


class Linear(Layer):
    kind = "linear"

    def __init__(self, width_in, width_out, rng=None, zero=False):
        super().__init__()
        if zero or rng is None:
            self.W = np.zeros((width_in, width_out))
        else:
            self.W = kaiming_uniform(width_in, width_out, rng)
        self.b = np.zeros(width_out)

    @property
    def spec(self):
        return LayerSpec(self.kind, self.W.shape[0], self.W.shape[1])

    def params(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return x @ self.W + self.b

    def backward(self, grad):
        x = self._cached()
        self.grads = {"W": x.T @ grad, "b": grad.sum(axis=0)}
        return grad @ self.W.T


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, width):
        super().__init__()
        self.gamma = np.ones(width)
        self.beta = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    @property
    def spec(self):
        n = self.gamma.shape[0]
        return LayerSpec(self.kind, n, n)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False, rng=None):
        if train:
            n = x.shape[0]
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean *= 1.0 - BN_MOMENTUM
            self.running_mean += BN_MOMENTUM * mean
            self.running_var *= 1.0 - BN_MOMENTUM
            self.running_var += BN_MOMENTUM * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train)
        return xhat * self.gamma + self.beta

    def backward(self, grad):
        xhat, inv_std, train = self._cached()
        self.grads = {"gamma": (grad * xhat).sum(axis=0), "beta": grad.sum(axis=0)}
        dxhat = grad * self.gamma
        if not train:
            return dxhat * inv_std
        n = grad.shape[0]
        return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class LeakyReLU(Layer):
    kind = "leakyrelu"

    def __init__(self, slope=LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    @property
    def spec(self):
        return LayerSpec(self.kind, value=self.slope)

    def forward(self, x, train=False, rng=None):
        self._cache = x > 0
        return np.where(self._cache, x, self.slope * x)

    def backward(self, grad):
        positive = self._cached()
        return grad * np.where(positive, 1.0, self.slope)


def selu(x):
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_grad(x):
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


class SELU(Layer):
    kind = "selu"

    @property
    def spec(self):
        return LayerSpec(self.kind)

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return selu(x)

    def backward(self, grad):
        return grad * selu_grad(self._cached())


class Dropout(Layer):
    """Inverted dropout: active only in train mode, identity in eval."""

    kind = "dropout"

    def __init__(self, p):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ModelError(f"dropout p must be in [0, 1), got {p}")
        self.p = p

    @property
    def spec(self):
        return LayerSpec(self.kind, value=self.p)

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self._cache = None
            return x
        if rng is None:
            rng = make_rng(stream=STREAM_DROPOUT)
        self._cache = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._cache

    def backward(self, grad):
        return grad if self._cache is None else grad * self._cache


def layer_from_spec(spec):
    if spec.kind == "linear":
        return Linear(spec.width_in, spec.width_out)
    if spec.kind == "batchnorm":
        return BatchNorm(spec.width_in)
    if spec.kind == "leakyrelu":
        return LeakyReLU(spec.value)
    if spec.kind == "selu":
        return SELU()
    if spec.kind == "dropout":
        return Dropout(spec.value)
    raise ModelError(f"unknown layer kind {spec.kind!r}")


class MlpStack:
    """Ordered layers whose widths chain from `in_width` to `out_width`."""

    def __init__(self, layers):
        self.layers = list(layers)
        width = None
        for layer in self.layers:
            if isinstance(layer, (Linear, BatchNorm)):
                spec = layer.spec
                if width is not None and spec.width_in != width:
                    raise ModelError(f"{layer.kind} expects width {spec.width_in}, stack carries {width}")
                width = spec.width_out
        if width is None:
            raise ModelError("stack needs at least one Linear or BatchNorm layer")
        self.in_width = next(l.spec.width_in for l in self.layers if isinstance(l, (Linear, BatchNorm)))
        self.out_width = width

    @classmethod
    def lbr(cls, in_width, widths, rng, dropout=0.0, slope=LEAKY_SLOPE):
        """Linear -> BatchNorm -> LeakyReLU blocks, optional dropout after each."""
        layers = []
        for width in widths:
            layers += [Linear(in_width, width, rng), BatchNorm(width), LeakyReLU(slope)]
            if dropout > 0:
                layers.append(Dropout(dropout))
            in_width = width
        return cls(layers)

    @classmethod
    def from_specs(cls, specs):
        return cls([layer_from_spec(s) for s in specs])

    def specs(self):
        return [layer.spec for layer in self.layers]

    def forward(self, x, mode=EVAL, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ModelError(f"batch width {x.shape[-1]} does not match stack input {self.in_width}")
        train = mode == TRAIN
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params().items()}

    def named_grads(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k in layer.params():
                if k not in layer.grads:
                    raise ModelError(f"layer {i} has no gradient for {k}; run backward first")
                out[f"{i}.{k}"] = layer.grads[k]
        return out

    def named_buffers(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers().items()}

    def load_state(self, tensors):
        for name, target in {**self.named_params(), **self.named_buffers()}.items():
            if name not in tensors:
                raise ModelError(f"missing tensor {name}")
            if tensors[name].shape != target.shape:
                raise ModelError(f"tensor {name} has shape {tensors[name].shape}, expected {target.shape}")
            target[...] = tensors[name]


def forward(stack, batch, mode=EVAL, rng=None):
    return stack.forward(batch, mode, rng)


def backward(stack, upstream):
    """Return (parameter gradients, input gradient) for the last forward pass."""
    grad_in = stack.backward(upstream)
    return stack.named_grads(), grad_in


# ---------- Optimization ----------

@dataclass(frozen=True)
class Schedule:
    """Cyclic step decay: lr is multiplied by gamma at each milestone inside a cycle."""

    base_lr: float
    cycle: int
    milestones: tuple = ()
    gamma: float = 0.1


def linker_schedule(base_lr):
    return Schedule(base_lr, 5, (3,))


def gcn_schedule(base_lr):
    return Schedule(base_lr, 10, (2, 5, 8))


def lr_at(schedule, epoch):
    position = epoch % schedule.cycle
    drops = sum(1 for m in schedule.milestones if position >= m)
    return schedule.base_lr * schedule.gamma ** drops


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: Schedule = None
    velocity: dict = field(default_factory=dict)
    epoch: int = 0

    def begin_epoch(self, epoch):
        self.epoch = epoch
        if self.schedule is not None:
            self.lr = lr_at(self.schedule, epoch)
        return self.lr


def sgd_step(opt, params, grads):
    """
    Classical momentum with coupled weight decay:
    v <- mu*v + g + wd*theta ; theta <- theta - lr*v. Updates in place.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient in {name} at epoch {opt.epoch}")
    for name, theta in params.items():
        if theta.shape != grads[name].shape:
            raise ModelError(f"gradient shape {grads[name].shape} does not match {name} {theta.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(theta)
        v *= opt.momentum
        v += grads[name] + opt.weight_decay * theta
        theta -= opt.lr * v
    return params


# ---------- Losses ----------

def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits, labels, sample_weight=None):
    """
    Mean (optionally weighted) cross-entropy via log-sum-exp.

    Returns (loss, dloss/dlogits, probabilities).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    probs = np.exp(log_p)
    nll = -log_p[np.arange(n), labels]

    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    total = w.sum()
    loss = float((w * nll).sum() / total)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad, probs


@dataclass
class ArcFaceHead:
    weight: np.ndarray
    s: float = 40.0
    m: float = 0.25

    @classmethod
    def create(cls, n_classes, width, rng, s=40.0, m=0.25):
        return cls(rng.standard_normal((n_classes, width)) * np.sqrt(1.0 / width), s, m)


def _unit(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ModelError(f"{what} contains a zero row")
    return x / norms, norms


def _unit_backward(unit, norms, grad_unit):
    # d(x/|x|) applied to an upstream gradient
    return (grad_unit - unit * (unit * grad_unit).sum(axis=1, keepdims=True)) / norms


def arcface_loss(head, embeddings, labels):
    """
    Additive angular margin softmax.

    logit_y = s*cos(theta_y + m), other logits s*cos(theta_c), on normalized
    embeddings and class weights. Returns (loss, grad wrt embeddings,
    grad wrt class weights, cosine matrix).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = head.weight.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ModelError(f"class label out of range [0, {n_classes})")
    x_hat, x_norm = _unit(embeddings, "embeddings")
    w_hat, w_norm = _unit(head.weight, "class weights")
    cos = np.clip(x_hat @ w_hat.T, -1.0, 1.0)

    rows = np.arange(labels.shape[0])
    logits = head.s * cos
    dlogit_dcos = np.full_like(cos, head.s)
    if head.m != 0.0:
        cos_y = cos[rows, labels]
        theta = np.arccos(cos_y)
        logits[rows, labels] = head.s * np.cos(theta + head.m)
        sin_theta = np.maximum(np.sqrt(1.0 - cos_y ** 2), 1e-12)
        dlogit_dcos[rows, labels] = head.s * np.sin(theta + head.m) / sin_theta

    loss, dlogits, _ = softmax_ce(logits, labels)
    dcos = dlogits * dlogit_dcos
    grad_x = _unit_backward(x_hat, x_norm, dcos @ w_hat)
    grad_w = _unit_backward(w_hat, w_norm, dcos.T @ x_hat)
    return loss, grad_x, grad_w, cos


# ---------- Gradient verification ----------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst: str
    checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def gradient_check(loss_fn, params, grads, tolerance=1e-4, eps=1e-5, floor=1e-4, max_entries=10_000, rng=None):
    """
    Compare analytic gradients with central differences.

    `loss_fn()` must recompute the scalar loss from the current contents of
    `params`, which are perturbed in place and restored. The relative error of
    an entry is |a - n| / max(|a|, |n|, floor).
    """
    total = sum(p.size for p in params.values())
    rng = rng or np.random.default_rng(0)
    keep = None
    if total > max_entries:
        keep = set(rng.choice(total, size=max_entries, replace=False).tolist())

    worst, worst_name, checked, offset = 0.0, "", 0, 0
    for name, p in params.items():
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ModelError(f"parameter {name} must be contiguous for gradient checking")
        analytic = np.asarray(grads[name]).reshape(-1)
        for t in range(flat.size):
            if keep is not None and offset + t not in keep:
                continue
            old = flat[t]
            flat[t] = old + eps
            up = loss_fn()
            flat[t] = old - eps
            down = loss_fn()
            flat[t] = old
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[t] - numeric) / max(abs(analytic[t]), abs(numeric), floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{t}]"
        offset += flat.size
    return GradCheckReport(float(worst), worst_name, checked, tolerance)


def check_stack_gradients(stack, x, mode=TRAIN, seed=0, tolerance=1e-4, eps=1e-5):
    """Gradient check of a stack plus its input under loss = sum(out * R)."""
    x = np.array(x, dtype=np.float64)
    upstream = np.random.default_rng(seed).standard_normal((x.shape[0], stack.out_width))

    def run():
        return stack.forward(x, mode, np.random.default_rng(seed + 1))

    run()
    grads, grad_in = backward(stack, upstream)
    params = {**stack.named_params(), "input": x}
    grads = {**grads, "input": grad_in}
    return gradient_check(lambda: float((run() * upstream).sum()), params, grads, tolerance, eps)
