"""Fully connected ELU network with analytic backprop and the Adam optimizer.

Inputs are demand profiles divided elementwise by a stored normalization
vector; outputs are multiplied elementwise by a stored scale vector (device
capacities) so the raw schedule is in MW from the start.  Both vectors are
part of the parameters but are never trained.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
HIDDEN = (40, 40, 40)


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # weights[k] has shape (fan_out, fan_in)
    biases: list[np.ndarray]
    input_scale: np.ndarray
    output_scale: np.ndarray

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.input_scale.copy(),
            self.output_scale.copy(),
        )


def init_params(
    n_in: int,
    n_out: int,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = HIDDEN,
    input_scale: np.ndarray | None = None,
    output_scale: np.ndarray | None = None,
    output_gain: float = 1.0,
    output_bias: float = 0.0,
) -> MlpParams:
    """Uniform He fan-in initialization with zero hidden biases.

    The output layer's weights are multiplied by ``output_gain`` and its bias
    is filled with ``output_bias`` (in units of ``output_scale``).
    """
    sizes = (n_in,) + tuple(hidden) + (n_out,)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    weights[-1] *= output_gain
    biases[-1][:] = output_bias
    return MlpParams(
        weights,
        biases,
        np.ones(n_in) if input_scale is None else np.asarray(input_scale, dtype=float).copy(),
        np.ones(n_out) if output_scale is None else np.asarray(output_scale, dtype=float).copy(),
    )


@dataclass
class ForwardCache:
    inputs: np.ndarray  # normalized network input, (batch, n_in)
    pre: list[np.ndarray]  # pre-activations of each layer
    post: list[np.ndarray]  # activations feeding each layer (post[0] = inputs)


def forward(params: MlpParams, demand_vec: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Map demand vectors (batch, n_in) or (n_in,) to raw schedules."""
    x = np.asarray(demand_vec, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.sizes[0]:
        raise ValueError(f"input has width {x.shape[1]}, network expects {params.sizes[0]}")
    a = x / params.input_scale
    pre, post = [], [a]
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        u = a @ w.T + b
        pre.append(u)
        a = elu(u) if k < n_layers - 1 else u
        if k < n_layers - 1:
            post.append(a)
    z = a * params.output_scale
    cache = ForwardCache(post[0], pre, post)
    return (z[0] if single else z), cache


def backward(params: MlpParams, cache: ForwardCache, grad_z: np.ndarray) -> list[np.ndarray]:
    """Gradients of sum(grad_z * z) in :meth:`MlpParams.arrays` order."""
    g = np.atleast_2d(np.asarray(grad_z, dtype=float))
    if g.shape != cache.pre[-1].shape:
        raise ValueError(f"cotangent shape {g.shape} does not match cache {cache.pre[-1].shape}")
    delta = g * params.output_scale
    grads: list[np.ndarray] = []
    for k in range(len(params.weights) - 1, -1, -1):
        if k < len(params.weights) - 1:
            delta = delta * elu_grad(cache.pre[k])
        gw = delta.T @ cache.post[k]
        gb = delta.sum(axis=0)
        grads = [gw, gb] + grads
        delta = delta @ params.weights[k]
    return grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **kw)


def adam_step(params: MlpParams, grads: list[np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``."""
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ValueError("gradient shapes do not match parameters")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter array {i}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_checkpoint(path, params: MlpParams, state: AdamState | None = None, meta: dict | None = None) -> Path:
    """Write a versioned ``.npz`` checkpoint; ``meta`` must be JSON-serializable."""
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "sizes": list(params.sizes),
        "meta": meta or {},
    }
    arrays = {"input_scale": params.input_scale, "output_scale": params.output_scale}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{k}"] = w
        arrays[f"b{k}"] = b
    if state is not None:
        header["adam"] = {
            "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "step": state.step
        }
        for i, (m, v) in enumerate(zip(state.m, state.v)):
            arrays[f"adam_m{i}"] = m
            arrays[f"adam_v{i}"] = v
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    _write_npz(path, arrays)
    return path


def _write_npz(path: Path, arrays: dict) -> None:
    # fixed entry timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> tuple[MlpParams, AdamState | None, dict]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        n_layers = len(header["sizes"]) - 1
        params = MlpParams(
            [data[f"w{k}"].copy() for k in range(n_layers)],
            [data[f"b{k}"].copy() for k in range(n_layers)],
            data["input_scale"].copy(),
            data["output_scale"].copy(),
        )
        if list(params.sizes) != header["sizes"]:
            raise ValueError("checkpoint layer shapes do not match header")
        state = None
        if "adam" in header:
            n_arr = 2 * n_layers
            state = AdamState(
                **header["adam"],
                m=[data[f"adam_m{i}"].copy() for i in range(n_arr)],
                v=[data[f"adam_v{i}"].copy() for i in range(n_arr)],
            )
    return params, state, header["meta"]
