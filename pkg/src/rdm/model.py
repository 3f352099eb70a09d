"""Two-hidden-layer ReLU MLP producing per-sample cross-entropy risks."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernel import RiskVector

RDMP_MAGIC = b"RDMP"


@dataclass
class ModelParams:
    dims: tuple[int, ...]
    weights: list[Tensor]
    biases: list[Tensor]
    dropout: float = 0.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if not len(self.weights) == len(self.biases) == len(self.dims) - 1:
            raise ValueError(f"dims {self.dims} need {len(self.dims) - 1} weight/bias pairs")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise ValueError(f"layer {i}: shapes {w.shape}/{b.shape} do not match dims {self.dims}")

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.dims,
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
            self.dropout,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def load_flat(self, blob: np.ndarray) -> None:
        offset = 0
        for p in self.parameters():
            p.data[...] = blob[offset: offset + p.data.size].reshape(p.shape)
            offset += p.data.size


def init_xavier(dims, seed: int = 0, dropout: float = 0.0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid layer dims {dims}")
    rng = np.random.default_rng([seed, 0x3A7])
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return ModelParams(dims, weights, biases, dropout)


def forward_logits(params: ModelParams, inputs, train: bool = False,
                   step_seed: int = 0, domain_id: int = 0) -> Tensor:
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise ad.ShapeError(f"model expects n x {params.dims[0]} inputs, got {x.shape}")
    rate = params.dropout if train else 0.0
    last = len(params.weights) - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = ad.add(ad.matmul(x, w), b)
        if layer < last:
            x = ad.relu(x)
            x = ad.dropout(x, rate, (step_seed, domain_id, layer))
    return x


def forward_risks(params: ModelParams, batch, train: bool = False,
                  step_seed: int = 0, logit_scale: Tensor | None = None) -> RiskVector:
    """Per-sample softmax cross-entropy of one domain batch.

    ``logit_scale`` multiplies the logits before the loss; IRM's penalty is
    the derivative with respect to it at 1.
    """
    labels = np.asarray(batch.labels)
    c = params.dims[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logits = forward_logits(params, batch.inputs, train, step_seed, batch.domain_id)
    scaled = logits if logit_scale is None else ad.mul(logits, logit_scale)
    risks = ad.softmax_cross_entropy(scaled, labels)
    return RiskVector(batch.domain_id, risks, logits, labels)


def predict(params: ModelParams, inputs, chunk: int = 4096) -> np.ndarray:
    """Eval-mode logits as a plain array, computed in chunks."""
    outs = []
    for i in range(0, len(inputs), chunk):
        outs.append(forward_logits(params, inputs[i: i + chunk]).data)
    return np.concatenate(outs) if outs else np.zeros((0, params.dims[-1]))


def save_checkpoint(path, params: ModelParams) -> None:
    """``RDMP`` | u32 layer count | u32 dims | f64 dropout | f64 parameter blob."""
    with open(path, "wb") as f:
        f.write(RDMP_MAGIC)
        f.write(struct.pack("<I", len(params.dims)))
        f.write(struct.pack(f"<{len(params.dims)}I", *params.dims))
        f.write(struct.pack("<d", params.dropout))
        f.write(params.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != RDMP_MAGIC:
        raise ValueError(f"{path}: not an RDMP checkpoint")
    (k,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{k}I", raw, 8)
    off = 8 + 4 * k
    (dropout,) = struct.unpack_from("<d", raw, off)
    off += 8
    blob = np.frombuffer(raw, dtype="<f8", offset=off)
    params = init_xavier(dims, 0, dropout)
    if blob.size != params.flat().size:
        raise ValueError(f"{path}: parameter blob has {blob.size} values, expected {params.flat().size}")
    params.load_flat(blob.astype(np.float64))
    return params
