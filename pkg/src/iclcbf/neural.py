"""Small tanh MLPs with exact reverse-mode gradients, and Adam.

The ascent term of the barrier loss needs the parameter gradient of a
directional derivative ``grad_x B(x) . v``. We get it by pushing a tangent
``v`` forward alongside the activations (forward-mode), then running one
reverse pass over the augmented graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("identity", "tanh")


class Mlp:
    """Scalar-output MLP with tanh hidden layers.

    Parameters live in one flat float64 vector; per-layer weight and bias
    arrays are views into it so optimizers can update ``params`` in place.
    Weights are stored ``(fan_in, fan_out)`` so a layer is ``h @ W + b``.
    Inputs are multiplied by a fixed ``input_scale`` before the first layer,
    which keeps small-magnitude state spaces out of tanh's linear regime.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        output_activation: str = "identity",
        seed: int = 0,
        zero_output: bool = True,
        params: Optional[np.ndarray] = None,
        input_scale: Optional[Sequence[float]] = None,
    ):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or sizes[-1] != 1 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        if output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layer_sizes = sizes
        self.output_activation = output_activation
        self.hidden_activation = "tanh"
        self.seed = int(seed)
        scale = np.ones(sizes[0]) if input_scale is None else np.asarray(input_scale, dtype=float).ravel()
        if scale.shape != (sizes[0],) or not np.all(np.isfinite(scale)) or np.any(scale == 0):
            raise ValueError(f"input_scale must be {sizes[0]} finite nonzero values")
        self.input_scale = scale
        self._shapes = []
        total = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self._shapes.append((total, fan_in, fan_out))
            total += fan_in * fan_out + fan_out
        if params is None:
            params = self._init_params(total, zero_output)
        params = np.asarray(params, dtype=float)
        if params.shape != (total,):
            raise ValueError(f"expected {total} parameters, got {params.shape}")
        self.params = params.copy()
        self._bind()

    def _init_params(self, total: int, zero_output: bool) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        flat = np.zeros(total)
        last = len(self._shapes) - 1
        for k, (off, fan_in, fan_out) in enumerate(self._shapes):
            if zero_output and k == last:
                continue
            bound = 1.0 / np.sqrt(fan_in)
            flat[off:off + fan_in * fan_out] = rng.uniform(-bound, bound, fan_in * fan_out)
            flat[off + fan_in * fan_out:off + fan_in * fan_out + fan_out] = rng.uniform(-bound, bound, fan_out)
        return flat

    def _bind(self):
        self.weights, self.biases = [], []
        for off, fan_in, fan_out in self._shapes:
            self.weights.append(self.params[off:off + fan_in * fan_out].reshape(fan_in, fan_out))
            self.biases.append(self.params[off + fan_in * fan_out:off + fan_in * fan_out + fan_out])

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_params(self) -> int:
        return self.params.size

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.output_activation, self.seed, params=self.params,
                   input_scale=self.input_scale)

    def set_params(self, flat: np.ndarray) -> None:
        self.params[:] = flat

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.input_dim:
            raise ValueError(f"input dimension {x.shape[1]} != {self.input_dim}")
        return x * self.input_scale, single

    # -- evaluation -------------------------------------------------------

    def forward(self, x):
        """Network value; scalar for a single state, ``(B,)`` for a batch."""
        h, single = self._as_batch(x)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W + b)
        y = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        if self.output_activation == "tanh":
            y = np.tanh(y)
        return float(y[0]) if single else y

    __call__ = forward

    def value_and_input_gradient(self, x):
        h, single = self._as_batch(x)
        hs = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W + b)
            hs.append(h)
        y = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        g = np.ones_like(y)
        if self.output_activation == "tanh":
            y = np.tanh(y)
            g = 1.0 - y * y
        gh = g[:, None] * self.weights[-1][:, 0][None, :]
        for W, h in zip(reversed(self.weights[:-1]), reversed(hs)):
            gh = (gh * (1.0 - h * h)) @ W.T
        gh = gh * self.input_scale
        if single:
            return float(y[0]), gh[0]
        return y, gh

    def input_gradient(self, x) -> np.ndarray:
        """Exact gradient of the output with respect to the input."""
        return self.value_and_input_gradient(x)[1]

    # -- training ---------------------------------------------------------

    def tangent_forward(self, x: np.ndarray, v: Optional[np.ndarray] = None):
        """Value ``y`` and directional derivative ``dy = grad_x y . v``.

        Returns ``(y, dy, cache)``; pass ``cache`` to :meth:`backward`.
        """
        h, _ = self._as_batch(x)
        hd = None if v is None else np.asarray(v, dtype=float).reshape(h.shape) * self.input_scale
        cache = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            hin, hdin = h, hd
            h = np.tanh(hin @ W + b)
            if hd is not None:
                zd = hdin @ W
                hd = (1.0 - h * h) * zd
            else:
                zd = None
            cache.append((hin, hdin, h, zd))
        W, b = self.weights[-1], self.biases[-1]
        z = (h @ W + b)[:, 0]
        zd = None if hd is None else (hd @ W)[:, 0]
        cache.append((h, hd, None, zd))
        if self.output_activation == "tanh":
            y = np.tanh(z)
            yd = None if zd is None else (1.0 - y * y) * zd
        else:
            y, yd = z, zd
        return y, yd, (cache, y, zd)

    def backward(self, cache, gy: Optional[np.ndarray], gyd: Optional[np.ndarray] = None) -> np.ndarray:
        """Flat parameter gradient given dL/dy and dL/d(dy) per sample."""
        layers, y, zd_out = cache
        batch = len(y)
        gy = np.zeros(batch) if gy is None else np.asarray(gy, dtype=float)
        if self.output_activation == "tanh":
            s = 1.0 - y * y
            gz = gy * s
            if gyd is not None:
                gz = gz - gyd * 2.0 * y * s * zd_out
                gzd = gyd * s
            else:
                gzd = None
        else:
            gz = gy
            gzd = None if gyd is None else np.asarray(gyd, dtype=float)
        grad = np.zeros_like(self.params)
        gz = gz[:, None]
        gzd = None if gzd is None else gzd[:, None]
        for k in range(len(self._shapes) - 1, -1, -1):
            off, fan_in, fan_out = self._shapes[k]
            W = self.weights[k]
            hin, hdin, _, _ = layers[k]
            gW = hin.T @ gz
            if gzd is not None:
                gW += hdin.T @ gzd
            grad[off:off + fan_in * fan_out] = gW.ravel()
            grad[off + fan_in * fan_out:off + fan_in * fan_out + fan_out] = gz.sum(axis=0)
            if k == 0:
                break
            gh = gz @ W.T
            ghd = None if gzd is None else gzd @ W.T
            # hin is the tanh output of layer k-1
            _, _, h, zd = layers[k - 1]
            s = 1.0 - h * h
            gz = gh * s
            if ghd is not None:
                gz = gz - ghd * 2.0 * h * s * zd
                gzd = ghd * s
        return grad

    def parameter_gradient(self, x, gy=None, v=None, gyd=None) -> np.ndarray:
        """Gradient of ``sum(gy * y + gyd * dy)`` with respect to ``params``."""
        _, _, cache = self.tangent_forward(x, v)
        return self.backward(cache, gy, gyd)

    # -- persistence ------------------------------------------------------

    def header(self) -> str:
        sizes = ",".join(str(s) for s in self.layer_sizes)
        head = f"layer_sizes={sizes} hidden={self.hidden_activation} output={self.output_activation} seed={self.seed}"
        if np.any(self.input_scale != 1.0):
            head += " input_scale=" + ",".join(repr(float(v)) for v in self.input_scale)
        return head

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.header() + "\n")
            for p in self.params:
                fh.write(repr(float(p)) + "\n")

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path) as fh:
            head = fh.readline().split()
            fields = dict(item.split("=", 1) for item in head)
            params = np.array([float(line) for line in fh if line.strip()])
        if fields.get("hidden", "tanh") != "tanh":
            raise ValueError("only tanh hidden layers are supported")
        sizes = [int(s) for s in fields["layer_sizes"].split(",")]
        scale = fields.get("input_scale")
        scale = None if scale is None else [float(v) for v in scale.split(",")]
        return cls(sizes, fields["output"], int(fields["seed"]), params=params, input_scale=scale)


@dataclass
class Adam:
    """Adam with bias correction over a flat parameter vector."""

    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Update ``params`` in place and return it."""
        if grads.shape != params.shape or params.shape != self.m.shape:
            raise ValueError("parameter/gradient/accumulator shapes differ")
        self.step_count += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grads * grads
        mhat = self.m / (1.0 - self.beta1 ** self.step_count)
        vhat = self.v / (1.0 - self.beta2 ** self.step_count)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params
