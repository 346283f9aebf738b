"""Feed-forward networks with hand-written backpropagation and Adam.

Parameters of a network live in one flat float64 array (:class:`ParameterVector`);
per-layer weight and bias arrays are views into it, so an optimizer can update
the flat array in place.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.01
_PIECEWISE_LINEAR = {"relu", "leaky_relu", "identity"}


class NeuralError(ValueError):
    pass


class DimensionMismatch(NeuralError):
    pass


class NoCachedForward(NeuralError, RuntimeError):
    pass


class NonScalarOutput(NeuralError):
    pass


class ShapeMismatch(NeuralError):
    pass


class NonFiniteGradient(NeuralError, FloatingPointError):
    pass


class CheckpointVersionMismatch(NeuralError):
    pass


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "identity":
        return z
    raise NeuralError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(float)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "identity":
        return np.ones_like(z)
    raise NeuralError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[tuple[int, str], ...]
    output_dim: int
    output_activation: str = "identity"
    dropout: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple((int(w), str(a)) for w, a in self.hidden))
        drop = tuple(float(p) for p in self.dropout) or (0.0,) * len(self.hidden)
        object.__setattr__(self, "dropout", drop)
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w, _ in self.hidden):
            raise NeuralError("all layer dimensions must be >= 1")
        if len(self.dropout) != len(self.hidden):
            raise NeuralError("need one dropout probability per hidden layer")
        if any(not 0.0 <= p < 1.0 for p in self.dropout):
            raise NeuralError("dropout probabilities must lie in [0, 1)")
        for _, a in self.hidden:
            _act(a, np.zeros(1))
        _act(self.output_activation, np.zeros(1))

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w for w, _ in self.hidden] + [self.output_dim]

    @property
    def activations(self) -> list[str]:
        return [a for _, a in self.hidden] + [self.output_activation]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpSpec":
        return cls(d["input_dim"], tuple(tuple(h) for h in d["hidden"]), d["output_dim"],
                   d.get("output_activation", "identity"), tuple(d.get("dropout", ())))


class ParameterVector:
    """Flat parameter storage plus the (name -> slice, shape) layer map."""

    def __init__(self, shapes: Sequence[tuple[str, tuple[int, ...]]], flat: np.ndarray | None = None):
        self.index: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self.index[name] = (slice(offset, offset + size), tuple(shape))
            offset += size
        if flat is None:
            flat = np.zeros(offset)
        if flat.shape != (offset,):
            raise ShapeMismatch(f"flat vector has shape {flat.shape}, expected ({offset},)")
        self.flat = flat

    def __len__(self) -> int:
        return self.flat.shape[0]

    def view(self, name: str, flat: np.ndarray | None = None) -> np.ndarray:
        sl, shape = self.index[name]
        return (self.flat if flat is None else flat)[sl].reshape(shape)


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class MLP:
    """Fully connected network operating on batches of row vectors."""

    def __init__(self, spec: MlpSpec, seed: int | None = 0, init: str = "orthogonal",
                 hidden_gain: float = math.sqrt(2.0), output_gain: float = 1.0):
        self.spec = spec
        sizes = spec.layer_sizes
        shapes = []
        for i in range(len(sizes) - 1):
            shapes += [(f"W{i}", (sizes[i], sizes[i + 1])), (f"b{i}", (sizes[i + 1],))]
        self.params = ParameterVector(shapes)
        self.grad = np.zeros(len(self.params))
        self._cache = None
        if seed is not None:
            self.initialize(np.random.default_rng(seed), init, hidden_gain, output_gain)

    @property
    def n_layers(self) -> int:
        return len(self.spec.layer_sizes) - 1

    def W(self, i: int) -> np.ndarray:
        return self.params.view(f"W{i}")

    def b(self, i: int) -> np.ndarray:
        return self.params.view(f"b{i}")

    def initialize(self, rng: np.random.Generator, init: str = "orthogonal",
                   hidden_gain: float = math.sqrt(2.0), output_gain: float = 1.0) -> None:
        for i in range(self.n_layers):
            n_in, n_out = self.W(i).shape
            if init == "orthogonal":
                gain = output_gain if i == self.n_layers - 1 else hidden_gain
                self.W(i)[...] = _orthogonal(rng, n_in, n_out, gain)
                self.b(i)[...] = 0.0
            elif init == "fan_in_uniform":
                bound = 1.0 / math.sqrt(n_in)
                self.W(i)[...] = rng.uniform(-bound, bound, (n_in, n_out))
                self.b(i)[...] = rng.uniform(-bound, bound, n_out)
            elif init == "zeros":
                self.W(i)[...] = 0.0
                self.b(i)[...] = 0.0
            else:
                raise NeuralError(f"unknown init {init!r}")

    def copy(self) -> "MLP":
        other = MLP(self.spec, seed=None)
        other.params.flat[:] = self.params.flat
        return other

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x.reshape(1, -1) if single else x
        if x2.ndim != 2 or x2.shape[1] != self.spec.input_dim:
            raise DimensionMismatch(f"expected input dim {self.spec.input_dim}, got shape {x.shape}")
        return x2, single

    def _masks(self, n: int, noise_seed, rng) -> list[np.ndarray | None]:
        if rng is None:
            rng = np.random.default_rng(noise_seed)
        masks = []
        for (width, _), p in zip(self.spec.hidden, self.spec.dropout):
            if p > 0:
                masks.append((rng.random((n, width)) >= p) / (1.0 - p))
            else:
                masks.append(None)
        return masks

    def forward(self, x, mode: str = "eval", noise_seed: int | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Evaluate the network. ``train`` mode applies inverted dropout and
        caches activations for :meth:`backward`."""
        if mode not in ("train", "eval"):
            raise NeuralError(f"mode must be 'train' or 'eval', got {mode!r}")
        x2, single = self._check_input(x)
        masks = self._masks(x2.shape[0], noise_seed, rng) if mode == "train" else [None] * len(self.spec.hidden)
        acts = self.spec.activations
        zs, outs = [], [x2]
        h = x2
        for i in range(self.n_layers):
            z = h @ self.W(i) + self.b(i)
            a = _act(acts[i], z)
            zs.append(z)
            if i < len(masks) and masks[i] is not None:
                a = a * masks[i]
            outs.append(a)
            h = a
        self._cache = (zs, outs, masks, single)
        return h[0] if single else h

    __call__ = forward

    @property
    def output_preactivation(self) -> np.ndarray:
        """Pre-activation of the output layer (e.g. logits) from the last forward pass."""
        if self._cache is None:
            raise NoCachedForward("no forward pass cached")
        zs, _, _, single = self._cache
        return zs[-1][0] if single else zs[-1]

    def _backprop(self, grad_out, at_preactivation: bool = False) -> np.ndarray:
        if self._cache is None:
            raise NoCachedForward("backward() called without a preceding forward()")
        zs, outs, masks, single = self._cache
        g = np.asarray(grad_out, dtype=float)
        g = g.reshape(1, -1) if single or g.ndim == 1 else g
        if g.shape != outs[-1].shape:
            raise DimensionMismatch(f"output gradient has shape {g.shape}, expected {outs[-1].shape}")
        acts = self.spec.activations
        grad = np.zeros(len(self.params))
        for i in reversed(range(self.n_layers)):
            a = outs[i + 1]
            if i < len(masks) and masks[i] is not None:
                g = g * masks[i]
                a_raw = _act(acts[i], zs[i])
            else:
                a_raw = a
            if not (at_preactivation and i == self.n_layers - 1):
                g = g * _act_grad(acts[i], zs[i], a_raw)
            self.params.view(f"W{i}", grad)[...] = outs[i].T @ g
            self.params.view(f"b{i}", grad)[...] = g.sum(axis=0)
            g = g @ self.W(i).T
        self._input_grad = g
        return grad

    def backward(self, loss_gradient_at_output, at_preactivation: bool = False) -> np.ndarray:
        """Gradient of the loss w.r.t. the flat parameter vector, given dL/d(output)
        for the most recent forward pass (summed over the batch).

        With ``at_preactivation`` the supplied gradient is taken w.r.t. the output
        layer's pre-activation instead, skipping the head's derivative."""
        self.grad = self._backprop(loss_gradient_at_output, at_preactivation)
        return self.grad

    def backward_input(self, loss_gradient_at_output) -> np.ndarray:
        """dL/d(input) for the most recent forward pass; parameters' grads untouched."""
        self._backprop(loss_gradient_at_output)
        _, _, _, single = self._cache
        return self._input_grad[0] if single else self._input_grad

    def input_gradient(self, x) -> np.ndarray:
        """d(output)/d(input) of a scalar-output network, evaluated in eval mode."""
        if self.spec.output_dim != 1:
            raise NonScalarOutput("input_gradient needs a scalar-output network")
        x2, single = self._check_input(x)
        self.forward(x2, mode="eval")
        g = self.backward_input(np.ones((x2.shape[0], 1)))
        return g[0] if single else g

    def input_gradient_penalty(self, x, target_norm: float = 1.0, mode: str = "train",
                               noise_seed: int | None = None,
                               rng: np.random.Generator | None = None):
        """Mean of (||d out/dx|| - target_norm)^2 over the batch and its parameter gradient.

        Second derivatives are exact for piecewise-linear hidden activations with
        an identity or sigmoid head. Returns ``(penalty, grad_norms, param_grad)``.
        """
        spec = self.spec
        if spec.output_dim != 1:
            raise NonScalarOutput("gradient penalty needs a scalar-output network")
        if any(a not in _PIECEWISE_LINEAR for _, a in spec.hidden):
            raise NeuralError("gradient penalty supports piecewise-linear hidden activations only")
        if spec.output_activation not in ("identity", "sigmoid"):
            raise NeuralError("gradient penalty supports identity or sigmoid heads only")
        x2, _ = self._check_input(x)
        n = x2.shape[0]
        self.forward(x2, mode=mode, noise_seed=noise_seed, rng=rng)
        zs, outs, masks, _ = self._cache
        L = self.n_layers
        acts = spec.activations
        gains = []
        for i in range(L - 1):
            d = _act_grad(acts[i], zs[i], outs[i + 1])
            if masks[i] is not None:
                d = d * masks[i]
            gains.append(d)
        # backward tangent: g_i = d f / d(layer-i input), per sample
        back = [None] * (L + 1)
        back[L] = np.ones((n, 1))
        for i in reversed(range(L)):
            v = back[i + 1] @ self.W(i).T
            back[i] = v * gains[i - 1] if i > 0 else v
        g = back[0]
        if spec.output_activation == "sigmoid":
            D = outs[-1]
            s = D * (1.0 - D)
        else:
            D = None
            s = np.ones((n, 1))
        G = s * g
        norms = np.linalg.norm(G, axis=1, keepdims=True)
        penalty = float(np.mean((norms - target_norm) ** 2))
        safe = np.where(norms > 0, norms, 1.0)
        u = (2.0 / n) * (norms - target_norm) * G / safe  # dP/dG

        grad = np.zeros(len(self.params))
        # s * d(u.g)/dtheta with activation gains frozen: forward tangent of u
        fwd = [None] * (L + 1)
        fwd[0] = u
        for i in range(L):
            t = fwd[i] @ self.W(i)
            fwd[i + 1] = t * gains[i] if i < L - 1 else t
        ug = fwd[L]  # (n, 1) directional derivative u.g
        for i in range(L):
            # d(u.g)/dW_i = sum_n fwd_in^T * back_out (back includes downstream gains)
            inp = fwd[i]
            out_back = back[i + 1] * s
            grad[self.params.index[f"W{i}"][0]] += (inp.T @ out_back).ravel()
        if D is not None:
            # (u.g) * ds/df * df/dtheta with ds/df = s (1 - 2D); backprop supplies the s
            coeff = ug * (1.0 - 2.0 * D)
            self._cache = (zs, outs, masks, False)
            grad += self._backprop(coeff)
        return penalty, norms.ravel(), grad

    # -- flat access ----------------------------------------------------------

    def get_flat(self) -> np.ndarray:
        return self.params.flat.copy()

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.params.flat.shape:
            raise ShapeMismatch("parameter vector shape mismatch")
        self.params.flat[:] = flat


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step: int = 0

    @classmethod
    def for_params(cls, n: int, learning_rate: float, **kw) -> "AdamState":
        return cls(learning_rate, m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step. ``params`` and the moments are updated in place."""
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeMismatch(f"params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, params


class Adam:
    """Adam bound to one network's flat parameter vector."""

    def __init__(self, net: MLP | np.ndarray, learning_rate: float, **kw):
        self.target = net.params.flat if isinstance(net, MLP) else net
        self.state = AdamState.for_params(self.target.shape[0], learning_rate, **kw)

    def step(self, grads) -> None:
        adam_step(self.state, self.target, grads)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm > 0:
        grad = grad * (max_norm / norm)
    return grad


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, nets: Mapping[str, MLP] = None, optimizers: Mapping[str, AdamState] = None,
                    arrays: Mapping[str, np.ndarray] = None, meta: Mapping | None = None) -> None:
    """Write networks, optimizer states and extra arrays to a versioned ``.npz``."""
    nets, optimizers, arrays = nets or {}, optimizers or {}, arrays or {}
    payload: dict[str, np.ndarray] = {}
    header = {"version": CHECKPOINT_VERSION, "nets": {}, "optimizers": {}, "arrays": sorted(arrays),
              "meta": dict(meta or {})}
    for name, net in nets.items():
        header["nets"][name] = net.spec.to_dict()
        payload[f"net.{name}"] = net.params.flat
    for name, st in optimizers.items():
        header["optimizers"][name] = {"learning_rate": st.learning_rate, "beta1": st.beta1,
                                      "beta2": st.beta2, "eps": st.eps, "step": st.step}
        payload[f"adam_m.{name}"] = st.m
        payload[f"adam_v.{name}"] = st.v
    for name, arr in arrays.items():
        payload[f"array.{name}"] = np.asarray(arr)
    payload["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    nets: dict[str, MLP]
    optimizers: dict[str, AdamState]
    arrays: dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionMismatch(
                f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
        nets = {}
        for name, spec in header["nets"].items():
            net = MLP(MlpSpec.from_dict(spec), seed=None)
            net.set_flat(data[f"net.{name}"])
            nets[name] = net
        opts = {}
        for name, h in header["optimizers"].items():
            opts[name] = AdamState(h["learning_rate"], h["beta1"], h["beta2"], h["eps"],
                                   data[f"adam_m.{name}"].copy(), data[f"adam_v.{name}"].copy(), h["step"])
        arrays = {name: data[f"array.{name}"].copy() for name in header["arrays"]}
    return Checkpoint(nets, opts, arrays, header["meta"])


class RunningMeanStd:
    """Streaming per-feature mean and variance (parallel-merge form)."""

    def __init__(self, dim: int, clip: float = 10.0, eps: float = 1e-8):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = eps
        self.clip = clip
        self.eps = eps

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float).reshape(-1, self.mean.shape[0])
        b_mean, b_var, n = x.mean(axis=0), x.var(axis=0), x.shape[0]
        delta = b_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(z, -self.clip, self.clip)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.mean": self.mean, f"{prefix}.var": self.var,
                f"{prefix}.count": np.array([self.count])}

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str) -> None:
        self.mean = arrays[f"{prefix}.mean"].copy()
        self.var = arrays[f"{prefix}.var"].copy()
        self.count = float(arrays[f"{prefix}.count"][0])
