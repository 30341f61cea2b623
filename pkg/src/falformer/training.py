"""Loss, reverse-mode gradients, RAdam, early stopping and the training loop."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from . import numerics as nx
from .attention import attend_backward
from .errors import ConfigError, DataError, NumericError
from .metrics import compute_metrics
from .model import ForwardTrace, ModelConfig, forward, init_params, param_shapes, softmax

log = logging.getLogger(__name__)

DEFAULT_LR = 1e-4
DEFAULT_EPOCHS = 20
DEFAULT_PATIENCE = 10
DEFAULT_CLIP = 5.0


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` via log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < len(logits):
        raise ValueError(f"label {label} out of range for {len(logits)} classes")
    top = logits.max()
    return float(top + np.log(np.exp(logits - top).sum()) - logits[label])


def cross_entropy_grad(logits, label):
    g = softmax(logits)
    g[label] -= 1.0
    return g


def backward(trace: ForwardTrace, params, config, label):
    """Gradients of the cross-entropy loss for every parameter tensor.

    Segment ids are treated as constants; gradients flow through the segment
    means and through each unrolled pseudoinverse iteration.
    Returns ``(loss, grads)``.
    """
    if not trace.retained:
        raise ConfigError("trace was produced without retain=True")
    if trace.config is not None and trace.config != config:
        raise ConfigError("trace was produced with a different config")
    if len(trace.layers) != config.layers:
        raise ConfigError(f"trace has {len(trace.layers)} layers, config has {config.layers}")
    if config.oracle_pinv and config.attention_mode != "exact":
        raise ConfigError("gradients need the iterative pseudoinverse (oracle_pinv=False)")

    grads = {}
    loss = cross_entropy(trace.logits, label)
    dlogits = cross_entropy_grad(trace.logits, label)[None, :]
    grads["classifier.weight"] = trace.cls_normed.T @ dlogits
    grads["classifier.bias"] = dlogits[0].copy()
    d_cls_normed = dlogits @ params["classifier.weight"].T
    d_cls, grads["final_norm.gamma"], grads["final_norm.beta"] = nx.layer_norm_backward(
        d_cls_normed, trace.final_ln_cache)

    dh = np.zeros_like(trace.hidden[-1])
    dh[0] += d_cls[0]
    for i in reversed(range(config.layers)):
        lt = trace.layers[i]
        # h_i = h_{i-1} + attn(ln(h_{i-1}))
        d_normed, attn_grads = attend_backward(dh, params.attention(i, config.heads), lt.attend)
        for key, g in attn_grads.items():
            grads[f"layers.{i}.attn.{key}"] = g
        d_prev, grads[f"layers.{i}.norm.gamma"], grads[f"layers.{i}.norm.beta"] = \
            nx.layer_norm_backward(d_normed, lt.ln_cache)
        dh = dh + d_prev

    grads["cls_token"] = dh[0].copy()
    d_embedded = dh[1:]
    dz = nx.gelu_backward(trace.pre_gelu, d_embedded)
    grads["embed.weight"] = trace.inputs.T @ dz
    grads["embed.bias"] = dz.sum(axis=0)
    return loss, {name: grads[name] for name in param_shapes(config)}


def loss_and_grads(bag_tokens, label, params, config, assignment=None):
    trace = forward(bag_tokens, params, config, assignment, retain=True)
    return backward(trace, params, config, label)


def synthetic_bag(config, n_tokens, seed):
    """A small seeded random bag for gradient checks."""
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n_tokens, config.d_f)), int(rng.integers(config.n_classes))


def grad_check(config, seed=0, eps=1e-5, n_tokens=6, params=None, bag=None):
    """Max relative error between analytic and central-difference gradients.

    Error per tensor is ``||g_a - g_n|| / max(||g_a||, ||g_n||)``; the maximum
    over all tensors is returned along with the per-tensor values. In falsa
    mode the segment assignment is computed once and held fixed.
    """
    if params is None:
        params = init_params(config, seed)
        # perturb LayerNorm affines and the CLS token away from their
        # symmetric init so every gradient path is exercised
        rng = np.random.default_rng(seed + 1)
        for name in params:
            if name.endswith((".gamma", ".beta")) or name == "cls_token":
                params[name] = params[name] + rng.normal(0, 0.3, size=params[name].shape)
    if bag is None:
        bag = synthetic_bag(config, n_tokens, seed)
    x, label = bag
    assignment = None
    if config.attention_mode == "falsa":
        assignment = forward(x, params, config, retain=False).assignment
    _, analytic = loss_and_grads(x, label, params, config, assignment)

    def loss_at():
        return cross_entropy(forward(x, params, config, assignment, retain=False).logits, label)

    errors = {}
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_at()
            flat[j] = orig - eps
            down = loss_at()
            flat[j] = orig
            nflat[j] = (up - down) / (2 * eps)
        denom = max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(analytic[name] - numeric) / denom)
    return max(errors.values()), errors


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """RAdam moments and hyperparameters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params, **hyper):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, **hyper)

    def hyperparams(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}


@numba.njit(cache=True)
def _radam_kernel(p, g, m, v, b1, b2, step_size, inv_sqrt_bias2, eps, adaptive):
    # single fused pass; the update is memory-bound for large weight matrices
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        if adaptive:
            p[i] -= step_size * (mi / (math.sqrt(vi) * inv_sqrt_bias2 + eps))
        else:
            p[i] -= step_size * mi


def radam_rho(t, beta2):
    """Length of the approximated SMA at step ``t``; the adaptive branch needs > 4."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    return rho_inf - 2.0 * t * b2t / (1.0 - b2t)


def radam_step(params, grads, state):
    """One rectified-Adam update, applied in place. Returns ``(params, state)``.

    While the variance rectification term rho_t <= 4 the step is plain
    bias-corrected momentum; afterwards it is the rectified adaptive step.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = radam_rho(t, b2)
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    step_size = (state.lr * rect if rho_t > 4.0 else state.lr) / bias1
    inv_sqrt_bias2 = 1.0 / math.sqrt(bias2)
    for name, g in grads.items():
        p = params[name]
        if not (p.flags.c_contiguous and p.dtype == np.float64):
            p = params[name] = np.ascontiguousarray(p, dtype=np.float64)
        g = np.ascontiguousarray(g, dtype=np.float64)
        if state.weight_decay:
            g = g + state.weight_decay * p
        _radam_kernel(p.reshape(-1), g.reshape(-1), state.m[name].reshape(-1),
                      state.v[name].reshape(-1), b1, b2, step_size, inv_sqrt_bias2,
                      state.eps, rho_t > 4.0)
    return params, state


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


class EarlyStopping:
    """Stop once validation loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience=DEFAULT_PATIENCE):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch, val_loss):
        """Record an epoch; returns True if it is the new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


# --------------------------------------------------------------------------
# evaluation and training loop


def _split_bag(bag):
    return bag.tokens, bag.label


def _eval_bag(bag, params, config):
    x, label = _split_bag(bag)
    logits = forward(x, params, config, retain=False).logits
    return label, softmax(logits), cross_entropy(logits, label)


def evaluate(bags, params, config, average="macro", return_loss=False, threads=1):
    """Metrics over a list of bags (anything with ``tokens`` and ``label``).

    With ``threads > 1`` bags are scored concurrently; results are gathered in
    input order, so the report does not depend on the thread count.
    """
    if not bags:
        raise DataError("cannot evaluate an empty dataset")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            scored = list(pool.map(lambda b: _eval_bag(b, params, config), bags))
    else:
        scored = [_eval_bag(b, params, config) for b in bags]
    labels = [s[0] for s in scored]
    probs = [s[1] for s in scored]
    losses = [s[2] for s in scored]
    report = compute_metrics(labels, np.array(probs), average=average)
    if return_loss:
        return report, float(np.mean(losses))
    return report


@dataclass
class TrainResult:
    params: object
    best_epoch: int
    best_val_loss: float
    history: list
    optimizer: OptimizerState
    stopped_early: bool


def history_line(record):
    """One epoch record as a single JSON line (sorted keys, repr-exact floats)."""
    return json.dumps(record, sort_keys=True)


def train(train_bags, val_bags, config: ModelConfig, seed=0, lr=DEFAULT_LR,
          epochs=DEFAULT_EPOCHS, patience=DEFAULT_PATIENCE, clip=DEFAULT_CLIP,
          average="macro", on_epoch=None, threads=1):
    """Train one bag per step; keep the parameters with the lowest validation loss.

    ``clip=None`` disables global-norm gradient clipping. ``on_epoch`` is
    called with each history record as soon as it is available.
    """
    if not train_bags or not val_bags:
        raise DataError("training and validation splits must be non-empty")
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    opt = OptimizerState.for_params(params, lr=lr)
    stopper = EarlyStopping(patience)
    best_params = params.copy()
    history = []
    stopped_early = False
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_bags))
        losses = []
        for idx in order:
            x, label = _split_bag(train_bags[idx])
            loss, grads = loss_and_grads(x, label, params, config)
            if clip is not None:
                clip_grad_norm(grads, clip)
            radam_step(params, grads, opt)
            losses.append(loss)
        report, val_loss = evaluate(val_bags, params, config, average, return_loss=True, threads=threads)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss}
        record.update({f"val_{k}": v for k, v in report.as_dict().items()})
        history.append(record)
        if stopper.update(epoch, val_loss):
            best_params = params.copy()
        log.info("epoch %d train_loss=%.6f val_loss=%.6f val_acc=%.2f",
                 epoch, record["train_loss"], val_loss, report.acc)
        if on_epoch is not None:
            on_epoch(record)
        if stopper.should_stop:
            stopped_early = True
            break
    return TrainResult(best_params, stopper.best_epoch, stopper.best, history, opt, stopped_early)
