import io
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from nmn.encoder import encode
from nmn.errors import DimensionError, TrainingError
from nmn.kg import KnowledgeGraph, merge_graphs
from nmn.matching import augment_neighbor, cross_match, match_pair, pair_distance, pair_distances, soft_aggregate
from nmn.model import ModelParams, save_checkpoint
from nmn.neighborhood import NeighborhoodSubgraph, neighbor_sampling_probs, sample_neighborhood, sample_table
from nmn.training import (TrainingData, _pretrain_objective, _ws_objective, candidate_negatives, main_loss,
                          nearest_neighbor_negatives, pretrain_distance, pretrain_loss, run_training, write_log,
                          ws_loss)

from conftest import check_gradient, random_pair, small_config, small_dataset, tiny_model


# ---------------------------------------------------------------------------
# pre-training objective


def test_pretrain_distance_examples():
    assert float(pretrain_distance([1.0, 2.0], [1.0, 2.0])) == 0.0
    assert float(pretrain_distance([1.0], [4.0])) == 3.0
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 6))
    assert abs(float(pretrain_distance(a, b)) - sum(abs(x - y) for x, y in zip(a, b))) <= 1e-12
    with pytest.raises(DimensionError):
        pretrain_distance([1.0], [1.0, 2.0])


def test_pretrain_loss_exact_zero_at_margin():
    # positives at distance 0, negatives at distance exactly gamma
    emb = np.array([[0.0], [0.0], [1.0], [1.0]])
    assert float(pretrain_loss([(0, 1), (2, 3)], [(0, 2), (1, 3)], emb, gamma=1.0)) == 0.0


def test_pretrain_loss_equal_distances():
    emb = np.array([[0.0], [2.0], [5.0], [7.0]])
    loss = pretrain_loss([(0, 1), (2, 3)], [(0, 1), (3, 2), (1, 0)], emb, gamma=0.5)
    assert float(loss) == 2 * 3 * 0.5


def test_pretrain_loss_double_loop_oracle():
    rng = np.random.default_rng(1)
    emb = rng.normal(size=(6, 3))
    pos, neg, gamma = [(0, 3), (1, 4)], [(0, 5), (2, 3)], 1.0
    d = lambda i, j: np.abs(emb[i] - emb[j]).sum()
    oracle = sum(max(0.0, d(*p) - d(*n) + gamma) for p in pos for n in neg)
    assert abs(float(pretrain_loss(pos, neg, emb, gamma)) - oracle) <= 1e-12


def test_pretrain_loss_needs_positives():
    with pytest.raises(ValueError):
        pretrain_loss([], [(0, 1)], np.zeros((2, 1)), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_hinge_losses_non_negative(seed, gamma):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(6, 2))
    pos = [tuple(p) for p in rng.integers(0, 6, size=(3, 2))]
    neg = [tuple(p) for p in rng.integers(0, 6, size=(4, 2))]
    assert float(pretrain_loss(pos, neg, emb, gamma)) >= 0


def test_per_positive_objective_oracle():
    rng = np.random.default_rng(2)
    h = torch.tensor(rng.normal(size=(8, 3)))
    pos = np.array([[0, 4], [1, 5]])
    right = np.array([[5, 6], [4, 7]])
    left = np.array([[2, 3], [0, 3]])
    d = lambda i, j: float((h[i] - h[j]).abs().sum())
    oracle = 0.0
    for k, (i, j) in enumerate(pos):
        for jj in right[k]:
            oracle += max(0.0, d(i, j) - d(i, jj) + 1.0)
        for ii in left[k]:
            oracle += max(0.0, d(i, j) - d(ii, j) + 1.0)
    assert abs(float(_pretrain_objective(h, pos, right, left, 1.0)) - oracle) <= 1e-12


# ---------------------------------------------------------------------------
# nearest-neighbor negatives


def _line_graph_pair(n1, n2, emb):
    g1 = KnowledgeGraph.from_parts({i: f"a{i}" for i in range(n1)}, [])
    g2 = KnowledgeGraph.from_parts({i: f"b{i}" for i in range(n2)}, [])
    emb = np.asarray(emb, dtype=float)
    return merge_graphs(g1, g2, emb[:n1], emb[n1:]), torch.tensor(emb)


def test_two_entity_graphs_have_one_corruption_per_side():
    m, h = _line_graph_pair(2, 2, [[0.0], [1.0], [0.0], [1.0]])
    assert nearest_neighbor_negatives([(0, 2)], h, 5, m) == [(0, 3), (1, 2)]


def test_zero_distance_impostor_is_included():
    m, h = _line_graph_pair(3, 3, [[0.0], [5.0], [9.0], [0.0], [0.0], [7.0]])
    negs = nearest_neighbor_negatives([(0, 3)], h, 1, m)
    assert negs == [(0, 4), (1, 3)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_negatives_match_exhaustive_search(seed, n_neg):
    rng = np.random.default_rng(seed)
    # integer coordinates make distance ties common
    emb = rng.integers(0, 4, size=(10, 2)).astype(float)
    m, h = _line_graph_pair(5, 5, emb)
    positives = [(0, 5), (3, 8)]
    d = lambda i, j: np.abs(emb[i] - emb[j]).sum()
    oracle = []
    for i, j in positives:
        right = sorted((c for c in range(5, 10) if c != j), key=lambda c: (d(i, c), c))[:n_neg]
        left = sorted((c for c in range(5) if c != i), key=lambda c: (d(c, j), c))[:n_neg]
        oracle += [(i, c) for c in right] + [(c, j) for c in left]
    assert nearest_neighbor_negatives(positives, h, n_neg, m) == oracle


# ---------------------------------------------------------------------------
# main objective


def test_candidate_negatives_drop_gold():
    owner, left, right = candidate_negatives(np.array([[0, 5]]), np.array([[5, 6, 7]]), np.array([[0, 1]]))
    assert owner.tolist() == [0, 0, 0]
    assert list(zip(left.tolist(), right.tolist())) == [(0, 6), (0, 7), (1, 5)]
    with pytest.raises(ValueError):
        candidate_negatives(np.array([[0, 5]]), np.array([[5]]), np.array([[0]]))


def _isolated_twins():
    # G1 has two isolated entities with identical features, G2 one
    g1 = KnowledgeGraph.from_parts({0: "a", 1: "b"}, [])
    g2 = KnowledgeGraph.from_parts({0: "c"}, [])
    f = np.array([[1.0, 2.0]])
    return merge_graphs(g1, g2, np.vstack([f, f]), f + 0.5)


def test_main_loss_equal_distances_gives_gamma():
    m = _isolated_twins()
    model = tiny_model(dim=2, d_g=2)
    loss = main_loss([(0, 2)], model, m, (np.array([[2]]), np.array([[0, 1]])), gamma=0.7)
    assert abs(float(loss) - 0.7) <= 1e-12


def test_main_loss_zero_when_negatives_are_far():
    tri = KnowledgeGraph.from_parts({0: "a", 1: "b", 2: "c", 3: "d"}, [(0, 0, 1), (1, 0, 2), (2, 0, 3)])
    f = np.random.default_rng(0).normal(size=(4, 3))
    m = merge_graphs(tri, tri, f, f)
    model = tiny_model(dim=3, d_g=2)
    h = encode(m, model.encoder)
    table = sample_table(m, h, model.sampler.W_s, 5)
    cands = (np.array([[4, 5, 6, 7]]), np.array([[0, 1, 2, 3]]))
    _, nl, nr = candidate_negatives(np.array([[0, 4]]), *cands)
    gap = float(pair_distances(h, *table, nl, nr, model.match).min())
    assert float(pair_distances(h, *table, [0], [4], model.match)[0]) == 0.0
    assert float(main_loss([(0, 4)], model, m, cands, gamma=gap)) == 0.0
    assert float(main_loss([(0, 4)], model, m, cands, gamma=gap + 1.0)) > 0.0


def test_main_loss_unrolled_oracle():
    _, _, m = random_pair(21, n1=3, n2=3, dim=3, p=0.7)
    model = tiny_model(dim=3, d_g=2, seed=4)
    positives = [(0, 3), (1, 5)]
    cand_right = np.array([[3, 4, 5], [5, 3, 4]])
    cand_left = np.array([[0, 1, 2], [2, 1, 0]])
    gamma, K = 1.5, 2
    h = encode(m, model.encoder)

    def d(i, j):
        si = sample_neighborhood(i, m, h, model.sampler.W_s, K)
        sj = sample_neighborhood(j, m, h, model.sampler.W_s, K)
        rl, rr, _ = match_pair(h[i], h[j], si, sj, model.match)
        return float(pair_distance(rl, rr))

    oracle = 0.0
    for k, (r, t) in enumerate(positives):
        negs = [(r, c) for c in cand_right[k] if c != t] + [(c, t) for c in cand_left[k] if c != r]
        oracle += sum(max(0.0, d(r, t) - d(a, b) + gamma) for a, b in negs)
    got = float(main_loss(positives, model, m, (cand_right, cand_left), gamma, K=K))
    assert abs(got - oracle) <= 1e-9


# ---------------------------------------------------------------------------
# sampler objective


def test_ws_loss_zero_for_identical_neighborhoods():
    tri = KnowledgeGraph.from_parts({0: "a", 1: "b", 2: "c"}, [(0, 0, 1), (1, 0, 2), (0, 0, 2)])
    f = np.random.default_rng(0).normal(size=(3, 3))
    m = merge_graphs(tri, tri, f, f)
    model = tiny_model(dim=3, d_g=2)
    assert float(ws_loss([(0, 3), (1, 4), (2, 5)], model, m)) == 0.0


def test_ws_objective_two_unit_vectors():
    one = torch.ones((1, 1), dtype=torch.float64)
    terms = [(0, 1, ((one, torch.tensor([[1.0, 0.0]], dtype=torch.float64)),
                     (one, torch.tensor([[0.0, 1.0]], dtype=torch.float64))))]
    h = torch.ones((2, 1), dtype=torch.float64)
    assert float(_ws_objective(h, torch.ones((1, 1), dtype=torch.float64), terms, 2)) == 2.0


def _ws_oracle(positives, model, m, h):
    total = 0.0
    for r, t in positives:
        nr, nt = m.neighbors(r), m.neighbors(t)
        sr = NeighborhoodSubgraph(r, nr, h[nr], torch.zeros(len(nr)))
        st_ = NeighborhoodSubgraph(t, nt, h[nt], torch.zeros(len(nt)))
        g = []
        if nr and nt:
            mp = cross_match(sr, st_)
            ms = (mp.matching_vectors_left, mp.matching_vectors_right)
        else:
            ms = (torch.zeros_like(h[nr]), torch.zeros_like(h[nt]))
        for center, s, mv in ((r, sr, ms[0]), (t, st_, ms[1])):
            if len(s) == 0:
                g.append(torch.zeros(model.match.d_g, dtype=torch.float64))
                continue
            alphas = neighbor_sampling_probs(h[center], s.neighbor_embeddings, model.sampler.W_s)
            aug = torch.stack([augment_neighbor(e, v, model.match.beta) for e, v in zip(s.neighbor_embeddings, mv)])
            g.append(soft_aggregate(aug, alphas, model.match))
        total += float((g[0] - g[1]).abs().sum())
    return total


def test_ws_loss_formula_oracle():
    _, _, m = random_pair(13, n1=5, n2=5, dim=3, p=0.5)
    model = tiny_model(dim=3, d_g=2, seed=2)
    h = encode(m, model.encoder).detach()
    positives = [(0, 5), (1, 6), (2, 7), (4, 9)]
    assert abs(float(ws_loss(positives, model, m)) - _ws_oracle(positives, model, m, h)) <= 1e-9


def test_ws_loss_gradient():
    _, _, m = random_pair(13, n1=5, n2=5, dim=3, p=0.6)
    model = tiny_model(dim=3, d_g=2, seed=2)
    h = encode(m, model.encoder).detach()
    positives = [(0, 5), (1, 6), (2, 7), (3, 8)]
    check_gradient(lambda: ws_loss(positives, model, m, h=h), model.sampler.W_s)


def test_encoder_gradient_through_main_loss():
    _, _, m = random_pair(21, n1=4, n2=4, dim=3, p=0.7)
    model = tiny_model(dim=3, d_g=2, seed=4)
    h = encode(m, model.encoder).detach()
    table = sample_table(m, h, model.sampler.W_s, 2)
    cands = (np.array([[4, 5, 6]]), np.array([[0, 1, 2]]))
    loss = lambda: main_loss([(0, 4)], model, m, cands, 5.0, table=table)
    for t in model.encoder_tensors():
        check_gradient(loss, t)


# ---------------------------------------------------------------------------
# schedule


def test_training_data_split():
    ds = small_dataset()
    data = TrainingData.from_dataset(ds, small_config())
    assert len(data.train) + len(data.valid) == 7 and len(data.valid) == 1 and len(data.test) == 17
    assert (data.train[:, 0] < data.merged.offset).all() and (data.train[:, 1] >= data.merged.offset).all()


def test_zero_epochs_returns_initial_params():
    ds = small_dataset()
    cfg = small_config(max_epochs=0)
    model = ModelParams.init(cfg, 4)
    before = model.snapshot()
    result = run_training(cfg, ds, model=model)
    assert result.log == []
    for k, v in result.model.snapshot().items():
        assert np.array_equal(v, before[k])


def test_ws_rounds_exactly_at_interval_multiples():
    ds = small_dataset()
    result = run_training(small_config(max_epochs=100, ws_interval=50), ds)
    ws_epochs = [e["epoch"] for e in result.log if e["ws_round"]]
    assert ws_epochs == [50, 100]
    assert all(e["phase"] == "ws" for e in result.log if e["ws_round"])
    main = [e["epoch"] for e in result.log if e["phase"] == "main"]
    assert main == list(range(1, 101))


def test_ws_round_changes_only_w_s():
    ds = small_dataset()
    cfg = small_config(max_epochs=6, ws_interval=3)
    model = ModelParams.init(cfg, 4)
    snaps = []
    run_training(cfg, ds, model=model, log_sink=lambda e: snaps.append((e, model.snapshot())))
    checked = 0
    for (prev, before), (entry, after) in zip(snaps, snaps[1:]):
        if not entry["ws_round"]:
            continue
        assert prev["phase"] == "main" and prev["epoch"] == entry["epoch"]
        for name in before:
            if name == "w_s":
                assert not np.array_equal(before[name], after[name])
            else:
                assert before[name].tobytes() == after[name].tobytes()
        checked += 1
    assert checked == 2


def _run_bytes(cfg, ds, tmp_path, tag):
    result = run_training(cfg, ds)
    ckpt = tmp_path / f"{tag}.npz"
    save_checkpoint(ckpt, result.model, cfg)
    log = tmp_path / f"{tag}.jsonl"
    write_log(result.log, log)
    return ckpt.read_bytes(), log.read_bytes()


def test_seeded_runs_are_bitwise_identical(tmp_path):
    ds = small_dataset()
    cfg = small_config(max_epochs=5)
    assert _run_bytes(cfg, ds, tmp_path, "a") == _run_bytes(cfg, ds, tmp_path, "b")


def test_vanishing_learning_rate_leaves_parameters():
    ds = small_dataset()
    cfg = small_config(max_epochs=1, lr=1e-300, ws_interval=1)
    model = ModelParams.init(cfg, 4)
    before = model.snapshot()
    run_training(cfg, ds, model=model)
    for k, v in model.snapshot().items():
        assert np.abs(v - before[k]).max() <= 1e-12


def test_training_moves_parameters_and_logs_fields():
    ds = small_dataset()
    cfg = small_config(max_epochs=4, ws_interval=2, lr=0.01)
    model = ModelParams.init(cfg, 4)
    before = model.snapshot()
    result = run_training(cfg, ds, model=model)
    assert any(not np.array_equal(v, before[k]) for k, v in result.model.snapshot().items())
    buf = io.StringIO()
    for e in result.log:
        assert set(e) == {"epoch", "phase", "loss", "hits1_val", "ws_round"}
        buf.write(json.dumps(e))
    phases = [e["phase"] for e in result.log]
    assert phases[0] == "pretrain" and "main" in phases and "ws" in phases


@pytest.mark.parametrize("kw", [dict(optimizer="adam"), dict(sampling="random"), dict(matching=False)])
def test_variants_train(kw):
    result = run_training(small_config(max_epochs=3, **kw), small_dataset())
    assert all(np.isfinite(e["loss"]) for e in result.log)


def test_non_finite_loss_aborts():
    ds = small_dataset()
    ds.features1 = ds.features1.copy()
    ds.features1[0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite pretrain loss at epoch 1"):
        run_training(small_config(), ds)


def test_pretraining_stops_on_patience():
    ds = small_dataset(sigma=0.0)
    result = run_training(small_config(max_epochs=50, pretrain_patience=3), ds)
    pre = [e for e in result.log if e["phase"] == "pretrain"]
    # validation Hits@1 is already perfect, so it can never improve again
    assert len(pre) == 4
