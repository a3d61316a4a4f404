"""Parameter storage and multilayer perceptrons on top of the tape."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T


class ParamStore:
    """Named float64 parameter arrays with fixed shapes."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._arrays:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, value):
        arr = np.asarray(value, dtype=float)
        if arr.shape != self._arrays[name].shape:
            raise ValueError(f"shape of {name!r} is fixed at {self._arrays[name].shape}, got {arr.shape}")
        self._arrays[name][...] = arr

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def keys(self):
        return self._arrays.keys()

    @property
    def count(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for k, v in self._arrays.items():
            new._arrays[k] = v.copy()
        return new

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays.values()]) if self._arrays else np.zeros(0)

    def to_dict(self):
        return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self._arrays.items()}

    @classmethod
    def from_dict(cls, d):
        store = cls()
        for name, entry in d.items():
            try:
                shape = tuple(int(n) for n in entry["shape"])
                data = np.asarray(entry["data"], dtype=float)
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"parameter {name!r}: malformed entry ({exc})") from None
            if data.size != int(np.prod(shape)):
                raise ValueError(f"parameter {name!r}: data length {data.size} does not match shape {shape}")
            store._arrays[name] = data.reshape(shape)
        return store


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output, e.g. ``(12, 64, 64, 12)``."""

    widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(int(w) <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self):
        return len(self.widths) - 1


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng, stack: int | None = None,
             zero_last: bool = False):
    """Glorot-uniform weights, zero biases.

    With ``stack=K`` each array gets a leading axis of size ``K`` so that K
    independent networks of the same architecture share one array.
    """
    lead = () if stack is None else (stack,)
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        if zero_last and i == spec.n_layers - 1:
            W = np.zeros(lead + (fan_in, fan_out))
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-lim, lim, size=lead + (fan_in, fan_out))
        store.add(f"{prefix}.W{i}", W)
        store.add(f"{prefix}.b{i}", np.zeros(lead + (1, fan_out)))


def mlp_forward(spec: MlpSpec, params, prefix: str, x):
    """Feed-forward pass recorded on the tape.

    ``params`` maps names to tape leaves. ``x`` has shape ``(N, in)``; for
    stacked networks the output is ``(K, N, out)``.
    """
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"{prefix}: expected input width {spec.widths[0]}, got {x.shape[-1]}")
    act = T.tanh if spec.activation == "tanh" else T.relu
    h = x
    for i in range(spec.n_layers):
        h = T.matmul(h, params[f"{prefix}.W{i}"]) + params[f"{prefix}.b{i}"]
        if i < spec.n_layers - 1:
            h = act(h)
    return h


def forward(spec: MlpSpec, params: ParamStore, x, tape: T.Tape, prefix: str = "mlp"):
    """Convenience wrapper: bind ``params`` to ``tape`` and run the MLP."""
    leaves = {k: tape.param(k, v) for k, v in params.items() if k.startswith(prefix + ".")}
    xv = x if isinstance(x, T.Var) else tape.constant(np.atleast_2d(np.asarray(x, dtype=float)))
    return mlp_forward(spec, leaves, prefix, xv)
