"""Dense numeric layer: MLPs with hand-rolled reverse-mode gradients,
a categorical policy head, and the Adam optimizer.

Everything runs in float64 numpy. Parameters of an :class:`Mlp` are exposed
as a flat list ``[W0, b0, W1, b1, ...]``; gradients use the same layout, so
optimizer state and finite-difference checks can treat them uniformly.

Checkpoint format (``mlp-ckpt v1``), stable across releases::

    mlp-ckpt v1
    layers <L>
    layer <in> <out> <relu|linear>
    W
    <out_dim lines of in_dim floats, row-major, %.17g>
    b
    <one line of out_dim floats>
    ... (repeated per layer)

Hidden layers are rectifiers, the output layer is linear; loading validates
that structure.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteGradientError, ShapeError

_CKPT_MAGIC = "mlp-ckpt v1"


def softmax(logits):
    """Numerically stable softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    """Numerically stable log-softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Mlp:
    """Fully-connected network: rectifier hidden layers, linear output.

    ``weights[k]`` has shape ``(out_k, in_k)`` (one row per output unit),
    ``biases[k]`` has shape ``(out_k,)``. Layer dimensions must chain.
    """

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("need one bias vector per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k} input width {w.shape[1]} != layer {k - 1} "
                    f"output width {self.weights[k - 1].shape[0]}"
                )

    @classmethod
    def create(cls, dims, rng):
        """Net with layer widths ``dims``; uniform(+-1/sqrt(fan_in)) init."""
        if len(dims) < 2:
            raise ShapeError("need at least input and output widths")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def n_layers(self):
        return len(self.weights)

    def param_list(self):
        """Flat parameter list [W0, b0, W1, b1, ...] (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
            squeeze = True
        elif x.ndim == 2:
            squeeze = False
        else:
            raise ShapeError(f"input must be a vector or a batch, got ndim={x.ndim}")
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[1]} != net input width {self.in_dim}")
        return x, squeeze

    def forward(self, x):
        """Forward pass; accepts a single vector or a (batch, in_dim) array."""
        x, squeeze = self._check_input(x)
        h = x
        last = self.n_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if k == last else np.maximum(z, 0.0)
        return h[0] if squeeze else h

    def forward_vec(self, x):
        """Unchecked single-vector forward; hot path for per-step sampling."""
        h = x
        last = self.n_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = w @ h + b
            h = z if k == last else np.maximum(z, 0.0)
        return h

    def _forward_cached(self, x):
        """Returns (output, hidden inputs per layer, pre-activations per layer)."""
        hs = [x]
        zs = []
        last = self.n_layers - 1
        h = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            zs.append(z)
            h = z if k == last else np.maximum(z, 0.0)
            if k != last:
                hs.append(h)
        return h, hs, zs

    def backward(self, x, out_grad):
        """Gradient of ``sum(out_grad * forward(x))`` w.r.t. all parameters.

        ``out_grad`` rows pair with input rows; for a batch the returned
        gradients are summed over the batch. Layout matches
        :meth:`param_list`.
        """
        x, _ = self._check_input(x)
        g = np.asarray(out_grad, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != (x.shape[0], self.out_dim):
            raise ShapeError(f"output grad shape {g.shape} != ({x.shape[0]}, {self.out_dim})")
        _, hs, zs = self._forward_cached(x)
        grads = [None] * (2 * self.n_layers)
        for k in range(self.n_layers - 1, -1, -1):
            grads[2 * k] = g.T @ hs[k]
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0:
                g = (g @ self.weights[k]) * (zs[k - 1] > 0)
        return grads

    def save(self, path):
        """Write the checkpoint format documented in the module docstring."""
        last = self.n_layers - 1
        lines = [_CKPT_MAGIC, f"layers {self.n_layers}"]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            act = "linear" if k == last else "relu"
            lines.append(f"layer {w.shape[1]} {w.shape[0]} {act}")
            lines.append("W")
            for row in w:
                lines.append(" ".join(f"{v:.17g}" for v in row))
            lines.append("b")
            lines.append(" ".join(f"{v:.17g}" for v in b))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or lines[0] != _CKPT_MAGIC:
            raise ShapeError(f"{path}: not a '{_CKPT_MAGIC}' checkpoint")
        n_layers = int(lines[1].split()[1])
        weights, biases = [], []
        pos = 2
        for k in range(n_layers):
            tag, in_dim, out_dim, act = lines[pos].split()
            if tag != "layer":
                raise ShapeError(f"{path}: expected 'layer' header at line {pos + 1}")
            in_dim, out_dim = int(in_dim), int(out_dim)
            expected_act = "linear" if k == n_layers - 1 else "relu"
            if act != expected_act:
                raise ShapeError(f"{path}: layer {k} activation {act!r}, expected {expected_act!r}")
            if lines[pos + 1] != "W":
                raise ShapeError(f"{path}: expected 'W' at line {pos + 2}")
            rows = [
                np.array([float(v) for v in lines[pos + 2 + r].split()])
                for r in range(out_dim)
            ]
            pos += 2 + out_dim
            if lines[pos] != "b":
                raise ShapeError(f"{path}: expected 'b' at line {pos + 1}")
            b = np.array([float(v) for v in lines[pos + 1].split()])
            pos += 2
            w = np.vstack(rows)
            if w.shape != (out_dim, in_dim) or b.shape != (out_dim,):
                raise ShapeError(f"{path}: layer {k} payload shape mismatch")
            weights.append(w)
            biases.append(b)
        return cls(weights, biases)


class AdamState:
    """Adam optimizer state for a flat parameter list.

    The update is the standard bias-corrected recurrence
    ``m <- b1*m + (1-b1)*g``, ``v <- b2*v + (1-b2)*g**2``,
    ``p <- p - lr * mhat / (sqrt(vhat) + eps)``.
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(state, params, grads):
    """One Adam update, applied to ``params`` in place.

    Raises :class:`NonFiniteGradientError` if any gradient entry is NaN or
    infinite, and leaves params/state untouched in that case.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient entries")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def sgd_step(params, grads, lr):
    """Plain gradient-descent update, in place."""
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient entries")
        p -= lr * g
    return params


class CategoricalPolicy:
    """Discrete policy: an MLP emits one logit per action, actions are
    drawn from the softmax."""

    def __init__(self, net):
        self.net = net

    @property
    def n_actions(self):
        return self.net.out_dim

    @property
    def obs_dim(self):
        return self.net.in_dim

    def logits(self, obs):
        return self.net.forward(obs)

    def probs(self, obs):
        return softmax(self.net.forward(obs))

    def sample(self, obs, rng):
        """Draw an action; returns ``(action index, log-probability)``."""
        logits = self.net.forward_vec(np.asarray(obs, dtype=np.float64))
        z = logits - logits.max()
        e = np.exp(z)
        total = e.sum()
        u = rng.random() * total
        action = int(min(np.searchsorted(np.cumsum(e), u, side="right"), self.n_actions - 1))
        return action, float(z[action] - math.log(total))

    def log_prob_grad(self, obs, action):
        """Gradient of log pi(action | obs) w.r.t. the policy parameters."""
        logits = self.net.forward(obs)
        if not 0 <= action < self.n_actions:
            raise ShapeError(f"action {action} out of range [0, {self.n_actions})")
        out_grad = -softmax(logits)
        out_grad[action] += 1.0
        return self.net.backward(obs, out_grad)

    def weighted_log_prob_grads(self, obs_batch, actions, coeffs):
        """Gradient of ``sum_t coeffs[t] * log pi(actions[t] | obs_batch[t])``.

        Single batched backward pass; used by the actor update.
        """
        obs_batch = np.asarray(obs_batch, dtype=np.float64)
        actions = np.asarray(actions)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        p = softmax(self.net.forward(obs_batch))
        out_grad = -p
        out_grad[np.arange(len(actions)), actions] += 1.0
        out_grad *= coeffs[:, None]
        return self.net.backward(obs_batch, out_grad)

    def entropy_and_grad(self, obs_batch):
        """Summed policy entropy over a batch and its parameter gradient."""
        obs_batch = np.asarray(obs_batch, dtype=np.float64)
        logp = log_softmax(self.net.forward(obs_batch))
        p = np.exp(logp)
        ent = -(p * logp).sum(axis=-1)
        out_grad = -p * (logp + ent[:, None])
        return float(ent.sum()), self.net.backward(obs_batch, out_grad)
