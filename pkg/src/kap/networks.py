"""Dense regression networks with channel-grouped hidden activations.

Hidden layers carry a channel count so each activation vector of width W
can be viewed as a (C, S) map with S = W / C spatial positions per
channel.  That view is what the activation- and attention-matching
objectives consume; the networks themselves are ordinary MLPs.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from kap import autodiff as ad
from kap.autodiff import ParamSet

CHECKPOINT_FORMAT = "kap-ckpt-v1"

_ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class LayerSpec:
    """One hidden layer: width units grouped into channels."""

    width: int
    channels: int
    activation: str = "relu"

    def __post_init__(self):
        if self.width <= 0 or self.channels <= 0:
            raise ValueError("layer width and channels must be positive")
        if self.width % self.channels != 0:
            raise ValueError(
                f"channels ({self.channels}) must divide width ({self.width})")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def spatial(self) -> int:
        return self.width // self.channels


def _default_hidden() -> tuple[LayerSpec, ...]:
    return (LayerSpec(64, 8, "relu"), LayerSpec(64, 8, "relu"))


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[LayerSpec, ...] = field(default_factory=_default_hidden)
    init_seed: int = 0

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ValueError("input_dim and output_dim must be positive")
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        object.__setattr__(self, "hidden", tuple(
            h if isinstance(h, LayerSpec) else LayerSpec(*h) for h in self.hidden))

    def param_layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        layout = []
        fan_in = self.input_dim
        for i, layer in enumerate(self.hidden):
            layout.append((f"layer{i}/w", (fan_in, layer.width)))
            layout.append((f"layer{i}/b", (layer.width,)))
            fan_in = layer.width
        layout.append(("out/w", (fan_in, self.output_dim)))
        layout.append(("out/b", (self.output_dim,)))
        return tuple(layout)

    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.param_layout())

    def to_json_dict(self) -> dict:
        return {
            "kind": "network",
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": [[h.width, h.channels, h.activation] for h in self.hidden],
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "NetworkSpec":
        if data.get("kind") != "network":
            raise ValueError("not a network spec")
        return cls(
            input_dim=int(data["input_dim"]),
            output_dim=int(data["output_dim"]),
            hidden=tuple(LayerSpec(int(w), int(c), str(a)) for w, c, a in data["hidden"]),
            init_seed=int(data["init_seed"]),
        )


@dataclass(frozen=True)
class ActivationTrace:
    """Post-activation hidden maps, one (batch, channels, spatial) entry per layer."""

    hidden: tuple

    @property
    def last(self):
        return self.hidden[-1]

    def __len__(self) -> int:
        return len(self.hidden)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_network(spec: NetworkSpec) -> "Network":
    """Glorot-uniform weights, zero biases, seeded by spec.init_seed."""
    rng = np.random.default_rng(spec.init_seed)
    params = {}
    fan_in = spec.input_dim
    for i, layer in enumerate(spec.hidden):
        params[f"layer{i}/w"] = glorot_uniform(rng, fan_in, layer.width)
        params[f"layer{i}/b"] = np.zeros(layer.width)
        fan_in = layer.width
    params["out/w"] = glorot_uniform(rng, fan_in, spec.output_dim)
    params["out/b"] = np.zeros(spec.output_dim)
    return Network(spec, ParamSet(params))


def forward_trace(spec: NetworkSpec, params, x):
    """Run the network, returning (output, ActivationTrace).

    `params` may hold plain ndarrays (inference) or autodiff Vars
    (training); the trace entries then have the same flavor.  `x` must be
    a (batch, input_dim) float array.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d input batch, got shape {x.shape}")
    if x.shape[1] != spec.input_dim:
        raise ValueError(
            f"input has {x.shape[1]} features, network expects {spec.input_dim}")
    batch = x.shape[0]
    h = x
    traces = []
    for i, layer in enumerate(spec.hidden):
        z = ad.matmul(h, params[f"layer{i}/w"]) + params[f"layer{i}/b"]
        h = _ACTIVATIONS[layer.activation](z)
        traces.append(h.reshape(batch, layer.channels, layer.spatial))
    out = ad.matmul(h, params["out/w"]) + params["out/b"]
    return out, ActivationTrace(tuple(traces))


@dataclass(frozen=True)
class Network:
    """An architecture plus one concrete parameter set."""

    spec: NetworkSpec
    params: ParamSet

    def __post_init__(self):
        if self.params.layout() != self.spec.param_layout():
            raise ValueError("parameters do not match the network layout")

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward_trace(self.spec, self.params, x)
        return out

    def forward_trace(self, x, params=None):
        return forward_trace(self.spec, params if params is not None else self.params, x)

    def with_params(self, params: ParamSet) -> "Network":
        return Network(self.spec, params)


# -- checkpoint serialization ------------------------------------------------
#
# kap-ckpt-v1 is plain JSON: a format tag, a spec object describing what
# the tensors parameterize, and the tensors as row-major float lists.
# Python's float repr round-trips binary64 exactly, so save -> load is
# lossless and byte-identical across reruns.


def save_checkpoint(path: str, spec: dict, params: ParamSet) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "spec": spec,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in params.items()
        ],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict, ParamSet]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {doc.get('format')!r}")
    tensors = {}
    for entry in doc["tensors"]:
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        tensors[entry["name"]] = arr
    return doc["spec"], ParamSet(tensors)


def save_network(path: str, net: Network) -> None:
    save_checkpoint(path, net.spec.to_json_dict(), net.params)


def load_network(path: str) -> Network:
    spec_dict, params = load_checkpoint(path)
    return Network(NetworkSpec.from_json_dict(spec_dict), params)
