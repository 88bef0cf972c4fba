"""The multimodal model: one encoder per modality feeding a shared header."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import Mlp, ShapeError, Tensor, concat, cross_entropy, forward_mlp, init_mlp, no_grad

CHECKPOINT_VERSION = 1


@dataclass
class GlobalModel:
    header: Mlp
    encoders: list[Mlp]
    feature_dim: int

    def __post_init__(self):
        for m, enc in enumerate(self.encoders):
            if enc.out_dim != self.feature_dim:
                raise ShapeError(f"encoder {m} outputs {enc.out_dim} features, expected {self.feature_dim}")
        if self.header.in_dim != self.feature_dim * len(self.encoders):
            raise ShapeError(f"header input dim {self.header.in_dim} != "
                             f"{len(self.encoders)} x {self.feature_dim}")

    @classmethod
    def create(cls, input_dims: Sequence[int], feature_dim: int, num_classes: int,
               encoder_hidden: Sequence[Sequence[int]], header_hidden: Sequence[int],
               rng: np.random.Generator, encoder_activation: str = "relu") -> "GlobalModel":
        encoders = []
        for dim, hidden in zip(input_dims, encoder_hidden):
            sizes = [dim, *hidden, feature_dim]
            encoders.append(init_mlp(sizes, [encoder_activation] * (len(sizes) - 1), rng))
        header = init_mlp([feature_dim * len(input_dims), *header_hidden, num_classes], "relu", rng)
        return cls(header, encoders, feature_dim)

    @property
    def num_modalities(self) -> int:
        return len(self.encoders)

    @property
    def num_classes(self) -> int:
        return self.header.out_dim

    def copy(self) -> "GlobalModel":
        return GlobalModel(self.header.copy(), [e.copy() for e in self.encoders], self.feature_dim)

    def modules(self) -> list[Mlp]:
        return [self.header, *self.encoders]

    def parameters(self) -> list[Tensor]:
        return [t for mod in self.modules() for t in mod.parameters()]

    def encode(self, inputs: Sequence[np.ndarray], trainable: Iterable[int] | None = None) -> list[Tensor]:
        """Features of every modality; only ``trainable`` encoders record a graph."""
        if len(inputs) != self.num_modalities:
            raise ShapeError(f"{len(inputs)} modality inputs for {self.num_modalities} encoders")
        live = set(range(self.num_modalities)) if trainable is None else set(trainable)
        feats = []
        for m, (enc, x) in enumerate(zip(self.encoders, inputs)):
            if m in live:
                feats.append(forward_mlp(enc, Tensor(x)))
            else:
                with no_grad():
                    feats.append(forward_mlp(enc, Tensor(x)))
        return feats

    def head(self, features: Sequence[Tensor]) -> Tensor:
        return forward_mlp(self.header, concat(features, axis=1))

    def logits(self, inputs: Sequence[np.ndarray], trainable: Iterable[int] | None = None) -> Tensor:
        return self.head(self.encode(inputs, trainable))

    # -- persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"version": np.asarray(CHECKPOINT_VERSION), "feature_dim": np.asarray(self.feature_dim)}
        for name, mod in zip(["header"] + [f"enc{m}" for m in range(self.num_modalities)], self.modules()):
            out[f"{name}.acts"] = np.asarray(mod.activations)
            for i, (w, b) in enumerate(mod.layers):
                out[f"{name}.{i}.w"] = w.data
                out[f"{name}.{i}.b"] = b.data
        return out

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.state_dict())

    @classmethod
    def load(cls, path) -> "GlobalModel":
        with np.load(Path(path)) as z:
            state = {k: z[k] for k in z.files}
        if int(state.get("version", -1)) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version")

        def mlp(name):
            acts = [str(a) for a in state[f"{name}.acts"]]
            layers = [(Tensor(state[f"{name}.{i}.w"], True), Tensor(state[f"{name}.{i}.b"], True))
                      for i in range(len(acts))]
            return Mlp(layers, acts)

        m = 0
        encoders = []
        while f"enc{m}.acts" in state:
            encoders.append(mlp(f"enc{m}"))
            m += 1
        return cls(mlp("header"), encoders, int(state["feature_dim"]))

    def same_shape(self, other: "GlobalModel") -> bool:
        a, b = self.parameters(), other.parameters()
        return len(a) == len(b) and all(x.shape == y.shape for x, y in zip(a, b))


def aggregate(models: Sequence[GlobalModel]) -> GlobalModel:
    """Parameter-wise arithmetic mean (FedAvg with equal weights)."""
    if not models:
        raise ValueError("nothing to aggregate")
    base = models[0]
    for i, m in enumerate(models[1:], start=1):
        if not base.same_shape(m):
            raise ShapeError(f"client model {i} is structurally different from client model 0")
    out = base.copy()
    n = len(models)
    params = [m.parameters() for m in models]
    # averaging offsets from client 0 keeps parameters that no client
    # changed bit-identical (a plain sum / n can drift by an ulp)
    for j, target in enumerate(out.parameters()):
        ref = params[0][j].data
        delta = np.zeros_like(ref)
        for p in params[1:]:
            delta += p[j].data - ref
        target.data = ref + delta / n
    return out


def evaluate(model: GlobalModel, dataset) -> tuple[float, float]:
    """``(accuracy, mean cross-entropy)``; argmax ties go to the lowest class."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    with no_grad():
        logits = model.logits(dataset.features)
        loss = float(cross_entropy(logits, dataset.labels).data)
    pred = np.argmax(logits.data, axis=1)
    return float(np.mean(pred == dataset.labels)), loss
