"""Dense neural network kernel: affine layers, ReLU, layer normalization,
exact reverse-mode gradients, and Adam.  Everything is float64 numpy; no
external ML framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

LN_EPS = 1e-5
FINAL_LAYER_SCALE = 1e-3


@dataclass
class MlpParams:
    """Per-layer weights/biases plus optional layer-norm affine parameters.

    ``sizes`` lists the widths including input and output; layer i maps
    sizes[i] -> sizes[i+1].  When layer norm is enabled it is applied to the
    input of every affine layer.
    """

    sizes: tuple
    use_layernorm: bool
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    ln_gain: list = field(default_factory=list)
    ln_offset: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def named_arrays(self):
        """Canonical (name, array) ordering used by Adam and checkpoints."""
        out = []
        for i in range(self.n_layers):
            out.append((f"w{i}", self.weights[i]))
            out.append((f"b{i}", self.biases[i]))
            if self.use_layernorm:
                out.append((f"ln_g{i}", self.ln_gain[i]))
                out.append((f"ln_b{i}", self.ln_offset[i]))
        return out

    def arrays(self):
        return [a for _, a in self.named_arrays()]

    def copy(self) -> "MlpParams":
        return MlpParams(
            sizes=self.sizes,
            use_layernorm=self.use_layernorm,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            ln_gain=[g.copy() for g in self.ln_gain],
            ln_offset=[o.copy() for o in self.ln_offset],
        )


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams) -> "AdamState":
        arrays = params.arrays()
        return cls(m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays])


def init_mlp(sizes, rng: np.random.Generator, use_layernorm: bool = False) -> MlpParams:
    """He-uniform weights for the ReLU layers; the output layer is scaled
    down by FINAL_LAYER_SCALE so the initial outputs sit near zero."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2:
        raise ConfigError("network needs at least input and output sizes")
    params = MlpParams(sizes=sizes, use_layernorm=use_layernorm)
    last = len(sizes) - 2
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if i == last:
            w *= FINAL_LAYER_SCALE
        params.weights.append(w)
        params.biases.append(np.zeros(fan_out))
        if use_layernorm:
            params.ln_gain.append(np.ones(fan_in))
            params.ln_offset.append(np.zeros(fan_in))
    return params


def hidden_width(dim_x: int, factor: float = 1.5) -> int:
    return int(round(factor * dim_x))


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass; returns (output, tape) with the activations needed for
    the backward pass.  Accepts (batch, in) or a single (in,) vector."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[-1] != params.sizes[0]:
        raise ConfigError(
            f"input size {h.shape[-1]} does not match network input {params.sizes[0]}")
    tape = []
    last = params.n_layers - 1
    for i in range(params.n_layers):
        if params.use_layernorm:
            mu = h.mean(-1, keepdims=True)
            var = h.var(-1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + LN_EPS)
            xhat = (h - mu) * inv_std
            a = params.ln_gain[i] * xhat + params.ln_offset[i]
        else:
            xhat, inv_std, a = None, None, h
        pre = a @ params.weights[i] + params.biases[i]
        out = np.maximum(pre, 0.0) if i < last else pre
        tape.append((a, xhat, inv_std, pre))
        h = out
    return (h[0], tape) if single else (h, tape)


def mlp_backward(params: MlpParams, tape, grad_output: np.ndarray):
    """Exact gradients of the forward map.

    Returns (grads, grad_input) where grads mirrors MlpParams and the
    parameter gradients are summed over the batch axis.
    """
    grad_output = np.atleast_2d(np.asarray(grad_output, float))
    grads = MlpParams(sizes=params.sizes, use_layernorm=params.use_layernorm,
                      weights=[None] * params.n_layers,
                      biases=[None] * params.n_layers,
                      ln_gain=[None] * params.n_layers if params.use_layernorm else [],
                      ln_offset=[None] * params.n_layers if params.use_layernorm else [])
    g = grad_output
    last = params.n_layers - 1
    for i in range(last, -1, -1):
        a, xhat, inv_std, pre = tape[i]
        if i < last:
            g = g * (pre > 0)
        grads.weights[i] = a.T @ g
        grads.biases[i] = g.sum(0)
        g = g @ params.weights[i].T
        if params.use_layernorm:
            grads.ln_gain[i] = (g * xhat).sum(0)
            grads.ln_offset[i] = g.sum(0)
            gx = g * params.ln_gain[i]
            # standard layer-norm backward over the feature axis
            g = inv_std * (gx - gx.mean(-1, keepdims=True)
                           - xhat * (gx * xhat).mean(-1, keepdims=True))
    return grads, g


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, lr: float) -> None:
    """One in-place Adam update with bias correction."""
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for idx, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
        m = state.m[idx]
        v = state.v[idx]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule(base_lr: float, step: int, total_steps: int) -> float:
    """Constant learning rate with a 10x cut at 90% of the run (boundary
    included in the decayed region)."""
    if step >= 0.9 * total_steps:
        return 0.1 * base_lr
    return base_lr
