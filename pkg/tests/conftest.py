import numpy as np
import pytest
import torch

from nmn.config import TrainConfig
from nmn.datatools import make_synthetic_pair
from nmn.kg import Dataset, KnowledgeGraph, merge_graphs
from nmn.model import ModelParams

torch.set_num_threads(1)

# lines printed by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_kg(rng, n, p=0.5, prefix="e", num_relations=3):
    triples = [(i, int(rng.integers(num_relations)), j)
               for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return KnowledgeGraph.from_parts({i: f"{prefix}{i}" for i in range(n)}, triples)


def random_pair(seed=0, n1=5, n2=5, dim=4, p=0.5):
    rng = np.random.default_rng(seed)
    g1 = random_kg(rng, n1, p, "a")
    g2 = random_kg(rng, n2, p, "b")
    f1 = rng.normal(size=(n1, dim))
    f2 = rng.normal(size=(n2, dim))
    return g1, g2, merge_graphs(g1, g2, f1, f2)


def tiny_model(dim=4, d_g=3, seed=0, beta=0.5, num_layers=2):
    cfg = TrainConfig(hidden_dim=dim, neighborhood_dim=d_g, seed=seed, beta=beta, num_layers=num_layers)
    return ModelParams.init(cfg, dim)


def small_dataset(seed=0, n=24, sigma=0.3):
    sp = make_synthetic_pair(n, avg_degree=3, perturb="noise" if sigma else "none", sigma=sigma, seed=seed, dim=4)
    return Dataset(sp.g1, sp.g2, sp.gold, sp.features1, sp.features2)


def small_config(**kw):
    base = dict(hidden_dim=4, neighborhood_dim=3, max_epochs=5, ws_interval=2, pretrain_patience=3, t=5)
    base.update(kw)
    return TrainConfig(**base)


def dense_propagation(g1, g2) -> np.ndarray:
    """Row-normalised ``A + I`` built straight from the triples of both graphs."""
    rows1 = {e: i for i, e in enumerate(sorted(g1.entity_ids))}
    rows2 = {e: len(rows1) + i for i, e in enumerate(sorted(g2.entity_ids))}
    n = len(rows1) + len(rows2)
    A = np.eye(n)
    for kg, rows in ((g1, rows1), (g2, rows2)):
        for h, _, t in kg.triples:
            A[rows[h], rows[t]] = A[rows[t], rows[h]] = 1.0
    return A / A.sum(axis=1, keepdims=True)


def numeric_grad(f, t: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central differences of the scalar ``f()`` with respect to every entry of ``t``."""
    g = torch.zeros_like(t)
    flat = t.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            fp = float(f())
            flat[i] = old - eps
            fm = float(f())
            flat[i] = old
            g.view(-1)[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def check_gradient(loss_fn, t: torch.Tensor, tol: float = 1e-4) -> float:
    t.requires_grad_(True)
    t.grad = None
    loss_fn().backward()
    analytic = t.grad.detach().clone()
    t.grad = None
    numeric = numeric_grad(loss_fn, t)
    err = rel_error(analytic, numeric)
    assert float(analytic.abs().max()) > 0, "gradient is identically zero"
    assert err <= tol, f"relative error {err:.3e}"
    return err


@pytest.fixture
def pair5():
    return random_pair(seed=3)
