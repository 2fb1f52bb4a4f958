"""Synthetic paired-modality regression worlds.

A latent pose-like vector z drives everything.  Labels are a fixed
nonlinear map of z.  The superior modality is a clean, (nearly) invertible
linear view of z.  The weak modality routes z through a rank-limited
encoder, pads it with distractor dimensions that carry no signal, and
adds noise.  The target domain keeps the same world but perturbs the weak
encoder, so knowledge learned at the source does not transfer verbatim.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

DATA_FORMAT = "kap-data-v1"


@dataclass(frozen=True)
class WorldSpec:
    """Dimensions, noise levels, and seed of one synthetic world."""

    latent_dim: int = 8
    joints: int = 5
    weak_dim: int = 12
    distractor_dim: int = 8
    sup_dim: int = 8
    weak_noise: float = 0.3
    sup_noise: float = 0.01
    target_shift: float = 0.5
    world_seed: int = 0

    def __post_init__(self):
        if min(self.latent_dim, self.joints, self.weak_dim, self.sup_dim) <= 0:
            raise ValueError("dimensions must be positive")
        if self.distractor_dim < 0:
            raise ValueError("distractor_dim must be non-negative")
        if self.distractor_dim >= self.weak_dim:
            raise ValueError("weak_dim must exceed distractor_dim")
        if self.weak_noise < 0.0 or self.sup_noise < 0.0:
            raise ValueError("noise levels must be non-negative")
        if self.target_shift < 0.0:
            raise ValueError("target_shift must be non-negative")

    @property
    def informative_dim(self) -> int:
        return self.weak_dim - self.distractor_dim

    @property
    def label_dim(self) -> int:
        return 3 * self.joints

    def to_json_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "joints": self.joints,
            "weak_dim": self.weak_dim,
            "distractor_dim": self.distractor_dim,
            "sup_dim": self.sup_dim,
            "weak_noise": self.weak_noise,
            "sup_noise": self.sup_noise,
            "target_shift": self.target_shift,
            "world_seed": self.world_seed,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "WorldSpec":
        return cls(
            latent_dim=int(data["latent_dim"]),
            joints=int(data["joints"]),
            weak_dim=int(data["weak_dim"]),
            distractor_dim=int(data["distractor_dim"]),
            sup_dim=int(data["sup_dim"]),
            weak_noise=float(data["weak_noise"]),
            sup_noise=float(data["sup_noise"]),
            target_shift=float(data["target_shift"]),
            world_seed=int(data["world_seed"]),
        )


_LABEL_HIDDEN = 32


class World:
    """Frozen generative maps for one WorldSpec."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.world_seed)
        d = spec.latent_dim
        self.label_in = rng.normal(size=(d, _LABEL_HIDDEN)) / np.sqrt(d)
        self.label_out = rng.normal(size=(_LABEL_HIDDEN, spec.label_dim)) \
            / np.sqrt(_LABEL_HIDDEN)
        self.sup_map = rng.normal(size=(d, spec.sup_dim)) / np.sqrt(d)
        # rank-limited weak encoder, built as a product so the rank holds
        # regardless of dimensions
        rank = min(max(1, d // 2), spec.informative_dim, d)
        left = rng.normal(size=(d, rank)) / np.sqrt(d)
        right = rng.normal(size=(rank, spec.informative_dim))
        self.weak_map = left @ right
        shift = rng.normal(size=self.weak_map.shape)
        shift /= np.linalg.norm(shift)
        self.weak_map_target = self.weak_map + spec.target_shift * shift

    def sample_latents(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(count, self.spec.latent_dim))

    def labels(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.label_in) @ self.label_out

    def superior_view(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        clean = z @ self.sup_map
        return clean + self.spec.sup_noise * rng.normal(size=clean.shape)

    def weak_view(self, z: np.ndarray, rng: np.random.Generator,
                  domain: str = "source") -> np.ndarray:
        if domain == "source":
            encoder = self.weak_map
        elif domain == "target":
            encoder = self.weak_map_target
        else:
            raise ValueError(f"unknown domain '{domain}'")
        informative = z @ encoder
        distractors = rng.normal(size=(z.shape[0], self.spec.distractor_dim))
        x = np.concatenate([informative, distractors], axis=1)
        return x + self.spec.weak_noise * rng.normal(size=x.shape)


def build_world(spec: WorldSpec) -> World:
    return World(spec)


class SourceSplit(NamedTuple):
    weak: np.ndarray
    superior: np.ndarray
    labels: np.ndarray


class TargetSplit(NamedTuple):
    weak: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class SplitCounts:
    source_train: int = 2048
    source_val: int = 512
    target_train: int = 1024
    target_test: int = 512

    def __post_init__(self):
        for name, n in self.to_json_dict().items():
            if n <= 0:
                raise ValueError(f"{name} must be positive")

    def to_json_dict(self) -> dict:
        return {"source_train": self.source_train, "source_val": self.source_val,
                "target_train": self.target_train, "target_test": self.target_test}

    @classmethod
    def from_json_dict(cls, data: dict) -> "SplitCounts":
        return cls(**{k: int(v) for k, v in data.items()})


@dataclass(frozen=True)
class DatasetBundle:
    world: WorldSpec
    counts: SplitCounts
    seed: int
    source_train: SourceSplit
    source_val: SourceSplit
    target_train: TargetSplit
    target_test: TargetSplit


def gen_bundle(world: World | WorldSpec, counts: SplitCounts | None = None,
               seed: int = 0) -> DatasetBundle:
    """Draw all four splits; each split gets its own child RNG stream."""
    if isinstance(world, WorldSpec):
        world = build_world(world)
    counts = counts or SplitCounts()

    def source(split_id: int, n: int) -> SourceSplit:
        rng = np.random.default_rng([seed, split_id])
        z = world.sample_latents(rng, n)
        return SourceSplit(weak=world.weak_view(z, rng, "source"),
                           superior=world.superior_view(z, rng),
                           labels=world.labels(z))

    def target(split_id: int, n: int) -> TargetSplit:
        rng = np.random.default_rng([seed, split_id])
        z = world.sample_latents(rng, n)
        return TargetSplit(weak=world.weak_view(z, rng, "target"),
                           labels=world.labels(z))

    return DatasetBundle(
        world=world.spec,
        counts=counts,
        seed=seed,
        source_train=source(0, counts.source_train),
        source_val=source(1, counts.source_val),
        target_train=target(2, counts.target_train),
        target_test=target(3, counts.target_test),
    )


def _encode_array(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _decode_array(entry: dict) -> np.ndarray:
    return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])


def save_bundle(path: str, bundle: DatasetBundle) -> None:
    doc = {
        "format": DATA_FORMAT,
        "world": bundle.world.to_json_dict(),
        "counts": bundle.counts.to_json_dict(),
        "seed": bundle.seed,
        "splits": {
            "source_train": {k: _encode_array(v)
                             for k, v in bundle.source_train._asdict().items()},
            "source_val": {k: _encode_array(v)
                           for k, v in bundle.source_val._asdict().items()},
            "target_train": {k: _encode_array(v)
                             for k, v in bundle.target_train._asdict().items()},
            "target_test": {k: _encode_array(v)
                            for k, v in bundle.target_test._asdict().items()},
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def load_bundle(path: str) -> DatasetBundle:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != DATA_FORMAT:
        raise ValueError(f"unsupported data format: {doc.get('format')!r}")
    splits = doc["splits"]

    def source(name: str) -> SourceSplit:
        entry = splits[name]
        return SourceSplit(**{k: _decode_array(entry[k]) for k in SourceSplit._fields})

    def target(name: str) -> TargetSplit:
        entry = splits[name]
        return TargetSplit(**{k: _decode_array(entry[k]) for k in TargetSplit._fields})

    return DatasetBundle(
        world=WorldSpec.from_json_dict(doc["world"]),
        counts=SplitCounts.from_json_dict(doc["counts"]),
        seed=int(doc["seed"]),
        source_train=source("source_train"),
        source_val=source("source_val"),
        target_train=target("target_train"),
        target_test=target("target_test"),
    )
