"""All trainable parameters and the checkpoint archive.

A checkpoint is an ``.npz`` archive of little-endian float64 arrays named::

    gcn_w_<l>, hw_t_<l>, hw_b_<l>   encoder layer l
    w_s                             neighbor sampler
    w_gate, w_n                     neighborhood aggregation
    beta                            matching-vector weight (shape (1,))

The training configuration is written next to it as ``<checkpoint>.config``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .encoder import EncoderParams, glorot
from .errors import IntegrityError
from .matching import MatchParams
from .neighborhood import SamplerParams


@dataclass
class ModelParams:
    encoder: EncoderParams
    sampler: SamplerParams
    match: MatchParams

    @classmethod
    def init(cls, config: TrainConfig, input_dim: int, dtype=torch.float64) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        dims = [input_dim] + [config.hidden_dim] * config.num_layers
        enc = EncoderParams.init(dims, rng=rng, dtype=dtype)
        d = dims[-1]
        sampler = SamplerParams(glorot(rng, (d, d), dtype))
        match = MatchParams.init(d, config.neighborhood_dim, config.beta, rng=rng, dtype=dtype)
        return cls(enc, sampler, match)

    def named(self) -> dict[str, torch.Tensor]:
        out = self.encoder.named()
        out["w_s"] = self.sampler.W_s
        out["w_gate"] = self.match.W_gate
        out["w_n"] = self.match.W_N
        return out

    def encoder_tensors(self) -> list[torch.Tensor]:
        return list(self.encoder.named().values())

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.named().values():
            t.requires_grad_(flag)
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.named().items()}

    def clone(self) -> "ModelParams":
        return from_arrays(self.snapshot() | {"beta": np.array([self.match.beta])})


def from_arrays(arrays) -> ModelParams:
    def t(name):
        if name not in arrays:
            raise IntegrityError(f"checkpoint is missing {name!r}")
        return torch.tensor(np.asarray(arrays[name], dtype=np.float64))

    layers = sorted(int(k.rsplit("_", 1)[1]) for k in arrays if k.startswith("gcn_w_"))
    enc = EncoderParams([t(f"gcn_w_{l}") for l in layers], [t(f"hw_t_{l}") for l in layers],
                        [t(f"hw_b_{l}") for l in layers])
    beta = float(np.asarray(arrays["beta"]).reshape(-1)[0]) if "beta" in arrays else 0.1
    return ModelParams(enc, SamplerParams(t("w_s")), MatchParams(beta, t("w_gate"), t("w_n")))


def save_checkpoint(path, model: ModelParams, config: TrainConfig | None = None) -> None:
    arrays = {k: v.astype("<f8") for k, v in model.snapshot().items()}
    arrays["beta"] = np.array([model.match.beta], dtype="<f8")
    # a file handle stops numpy from appending ".npz"
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    if config is not None:
        config.save(config_path(path))


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig | None]:
    with np.load(path) as z:
        model = from_arrays({k: z[k] for k in z.files})
    cpath = config_path(path)
    config = TrainConfig.load(cpath) if cpath.exists() else None
    return model, config


def config_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".config")
