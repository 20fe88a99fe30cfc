"""GCN structure encoder with per-layer highway gates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError
from .kg import MergedGraph


def glorot(rng: np.random.Generator, shape, dtype=torch.float64) -> torch.Tensor:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return torch.tensor(rng.uniform(-limit, limit, size=shape), dtype=dtype)


@dataclass
class EncoderParams:
    gcn_weights: list[torch.Tensor]
    highway_gate_weights: list[torch.Tensor]
    highway_gate_bias: list[torch.Tensor]

    @property
    def num_layers(self) -> int:
        return len(self.gcn_weights)

    @property
    def dims(self) -> list[int]:
        return [self.gcn_weights[0].shape[0]] + [w.shape[1] for w in self.gcn_weights]

    @classmethod
    def init(cls, dims=(300, 300, 300), rng: np.random.Generator | None = None,
             gate_bias: float = -1.0, dtype=torch.float64) -> "EncoderParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        ws, wt, bt = [], [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            if d_in != d_out:
                raise DimensionError("highway gating needs equal layer widths")
            ws.append(glorot(rng, (d_in, d_out), dtype))
            wt.append(glorot(rng, (d_out, d_out), dtype))
            bt.append(torch.full((d_out,), gate_bias, dtype=dtype))
        return cls(ws, wt, bt)

    def named(self) -> dict[str, torch.Tensor]:
        out = {}
        for l, (w, t, b) in enumerate(zip(self.gcn_weights, self.highway_gate_weights, self.highway_gate_bias)):
            out[f"gcn_w_{l}"] = w
            out[f"hw_t_{l}"] = t
            out[f"hw_b_{l}"] = b
        return out


def gcn_layer_forward(H: torch.Tensor, merged: MergedGraph, W: torch.Tensor) -> torch.Tensor:
    """``ReLU(D^-1 (A + I) H W)``."""
    if H.shape[0] != merged.num_nodes:
        raise DimensionError(f"H has {H.shape[0]} rows, graph has {merged.num_nodes} nodes")
    if H.shape[1] != W.shape[0]:
        raise DimensionError(f"H width {H.shape[1]} does not match W rows {W.shape[0]}")
    prop = merged.propagation(H.dtype)
    return torch.relu(prop @ (H @ W))


def highway_combine(H_in: torch.Tensor, H_out: torch.Tensor, W_T: torch.Tensor, b_T: torch.Tensor) -> torch.Tensor:
    if H_in.shape != H_out.shape or W_T.shape != (H_in.shape[1], H_in.shape[1]) or b_T.shape != (H_in.shape[1],):
        raise DimensionError("highway inputs must share one width")
    gate = torch.sigmoid(H_in @ W_T + b_T)
    return gate * H_out + (1.0 - gate) * H_in


def encode(merged: MergedGraph, params: EncoderParams, features: torch.Tensor | None = None) -> torch.Tensor:
    H = features if features is not None else torch.as_tensor(merged.features, dtype=params.gcn_weights[0].dtype)
    if H.shape[1] != params.dims[0]:
        raise DimensionError(f"feature width {H.shape[1]} != encoder input width {params.dims[0]}")
    for W, W_T, b_T in zip(params.gcn_weights, params.highway_gate_weights, params.highway_gate_bias):
        H = highway_combine(H, gcn_layer_forward(H, merged, W), W_T, b_T)
    return H
