import math

import numpy as np
import pytest

from equirouter.dataset import ModelInfo, RoutingTable, SynthConfig, generate_synthetic, make_split
from equirouter.neuralnet import grad_check
from equirouter.oracle import oracle_select, select_under_budget
from equirouter.rng import make_rng
from equirouter.router import (
    EquiHyper,
    MlpHyper,
    OracleRouter,
    assign_params,
    build_pair_set,
    build_pairs,
    film_modulate,
    init_equirouter,
    joint_feature,
    knn_scores,
    load_router,
    mse_objective,
    params_list,
    per_query_mac_counts,
    predict_costs,
    ranking_loss,
    ranking_objective,
    route,
    router_scores,
    save_cost_predictor,
    save_router,
    score_all,
    scores_batch,
    train_cost_predictor,
    train_equirouter,
    train_knn_router,
    train_mlp_router,
    train_mse_ablation,
    train_no_joint_ablation,
)

from conftest import make_table


def tiny_hyper(d_q, k, seed=0, **kw):
    defaults = dict(d_m=6, latent_dim=8, epochs=30, batch_size=64, learning_rate=3e-3)
    defaults.update(kw)
    return EquiHyper(d_q=d_q, n_models=k, seed=seed, **defaults)


# ---------------------------------------------------------------------------
# building blocks


def test_film_identity():
    z = np.array([0.3, -0.7])
    assert np.array_equal(film_modulate(z, np.ones(2), np.zeros(2)), z)


def test_film_constant():
    beta = np.array([5.0, -1.0])
    assert np.array_equal(film_modulate(np.array([9.0, 9.0]), np.zeros(2), beta), beta)


def test_film_elementwise():
    out = film_modulate(np.array([1.0, 2.0]), np.array([2.0, 0.5]), np.array([-1.0, 1.0]))
    assert out == pytest.approx([1.0, 2.0])


def test_film_dimension_mismatch():
    with pytest.raises(ValueError):
        film_modulate(np.ones(2), np.ones(3), np.ones(2))


def test_joint_feature_zero_difference_block():
    v = np.array([1.5, -2.0])
    out = joint_feature(v, v)
    assert np.array_equal(out, np.concatenate([v, v, v * v, np.zeros(2)]))


def test_joint_feature_length():
    assert joint_feature(np.ones(3), np.ones(3)).shape == (12,)


def test_joint_feature_values():
    out = joint_feature(np.array([1.0, -1.0]), np.array([2.0, 3.0]))
    assert out == pytest.approx([1, -1, 2, 3, 2, -3, 1, 4])


# ---------------------------------------------------------------------------
# scoring


def _reference_scores(p, x):
    """Straight-line per-model reimplementation of the scoring pipeline."""

    def dense(layer, v):
        out = layer.weight @ v + layer.bias
        return np.maximum(out, 0.0) if layer.activation == "relu" else out

    z = x
    for layer in p.trunk:
        z = dense(layer, z)
    D = z.size
    scores = []
    for j in range(p.model_embeddings.shape[0]):
        m = p.model_embeddings[j]
        gb = dense(p.film_proj, m)
        zj = gb[:D] * z + gb[D:]
        ej = dense(p.model_proj, m)
        if p.joint_feature:
            h = np.concatenate([zj, ej, zj * ej, np.abs(zj - ej)])
        else:
            h = np.concatenate([zj, ej])
        for layer in p.score_head:
            h = dense(layer, h)
        scores.append(h[0])
    return np.array(scores)


def test_score_all_identical_model_embeddings_tie():
    p = init_equirouter(tiny_hyper(5, 3, seed=2))
    p.model_embeddings = np.tile(p.model_embeddings[0], (3, 1))
    s = score_all(p, np.arange(5.0))
    assert s[0] == s[1] == s[2]


def test_score_all_zeroed_head_gives_bias():
    p = init_equirouter(tiny_hyper(5, 3, seed=3))
    for layer in p.score_head:
        layer.weight = np.zeros_like(layer.weight)
    p.score_head[-1].bias = np.array([0.25])
    assert score_all(p, np.zeros(5)) == pytest.approx([0.25, 0.25, 0.25])


@pytest.mark.parametrize("joint", [True, False])
def test_score_all_matches_reference_pipeline(joint):
    p = init_equirouter(tiny_hyper(6, 4, seed=4), joint_feature=joint)
    rng = make_rng(9, 0)
    for _ in range(5):
        x = rng.standard_normal(6)
        assert score_all(p, x) == pytest.approx(_reference_scores(p, x), rel=1e-12)


def test_score_permutation_invariance():
    p = init_equirouter(tiny_hyper(5, 4, seed=5))
    x = make_rng(10, 0).standard_normal(5)
    base = score_all(p, x)
    perm = np.array([2, 0, 3, 1])
    p.model_embeddings = p.model_embeddings[perm]
    assert score_all(p, x) == pytest.approx(base[perm], rel=1e-12)


def test_per_query_mac_counts_linear_in_k():
    h4 = tiny_hyper(5, 4)
    h8 = tiny_hyper(5, 8)
    trunk4, per_model4 = per_query_mac_counts(init_equirouter(h4))
    trunk8, per_model8 = per_query_mac_counts(init_equirouter(h8))
    assert trunk4 == trunk8  # trunk cost independent of pool size
    assert per_model4 == per_model8  # per-model cost independent of K
    total = lambda trunk, per, k: trunk + k * per
    assert total(trunk8, per_model8, 8) - total(trunk4, per_model4, 4) == 4 * per_model4


# ---------------------------------------------------------------------------
# pair construction and ranking loss


def test_build_pairs_mixed():
    pairs = build_pairs(np.array([1.0, 1.0, 0.0]), np.array([2.0, 1.0, 1.0]))
    assert set(map(tuple, pairs)) == {(0, 2), (1, 2), (1, 0)}


def test_build_pairs_empty_when_indistinguishable():
    pairs = build_pairs(np.array([0.5, 0.5]), np.array([1.0, 1.0]))
    assert len(pairs) == 0


def test_build_pairs_single_dominance():
    pairs = build_pairs(np.array([0.0, 1.0]), np.array([9.0, 9.0]))
    assert set(map(tuple, pairs)) == {(1, 0)}


def test_build_pairs_irreflexive_antisymmetric():
    rng = make_rng(20, 0)
    for _ in range(50):
        k = int(rng.integers(2, 7))
        a = np.round(rng.random(k), 1)
        c = np.round(rng.random(k), 1)
        pairs = set(map(tuple, build_pairs(a, c)))
        assert not any(i == j for i, j in pairs)
        assert not any((j, i) in pairs for i, j in pairs)


def test_pair_soundness_against_oracle():
    """If (i, j) is a pair, the oracle never chooses j when both are feasible."""
    rng = make_rng(21, 0)
    a = np.round(rng.random((20, 4)), 1)
    c = np.round(rng.random((20, 4)), 2) + 0.05
    t = make_table(perf=a, cost=c)
    for n in range(20):
        pairs = build_pairs(a[n], c[n])
        pick = oracle_select(t, n, budget=10.0)  # everything feasible
        # the oracle pick can never sit on the losing side of a pair
        assert not any(j == pick for _, j in pairs)


def test_ranking_loss_equal_scores_is_ln2():
    pairs = np.array([(0, 1), (2, 0)])
    assert ranking_loss(np.zeros(3), pairs) == pytest.approx(math.log(2), abs=1e-9)


def test_ranking_loss_hand_value():
    assert ranking_loss(np.array([2.0, 0.0]), np.array([(0, 1)])) == pytest.approx(
        math.log1p(math.exp(-2)), abs=1e-12
    )


def test_ranking_loss_saturation_no_overflow():
    loss = ranking_loss(np.array([50.0, 0.0]), np.array([(0, 1)]))
    assert 0 < loss < 1e-21
    big = ranking_loss(np.array([1000.0, 0.0]), np.array([(0, 1)]))
    assert np.isfinite(big) and big >= 0


def test_ranking_loss_shift_invariance():
    rng = make_rng(22, 0)
    s = rng.standard_normal(5)
    pairs = build_pairs(rng.random(5), rng.random(5))
    assert ranking_loss(s, pairs) == pytest.approx(ranking_loss(s + 17.3, pairs))


def test_ranking_loss_rejects_nonfinite_scores():
    with pytest.raises(ValueError):
        ranking_loss(np.array([np.inf, 0.0]), np.array([(0, 1)]))


# ---------------------------------------------------------------------------
# gradient correctness of the full objectives


def test_full_objective_gradients_match_fd():
    t = generate_synthetic(
        SynthConfig(n_queries=4, n_models=3, embed_dim=6, tie_fraction=0.5, noise_seed=3)
    )
    pairs = build_pair_set(t, np.arange(4))
    p = init_equirouter(EquiHyper(d_q=6, n_models=3, d_m=4, latent_dim=8, seed=7))

    def fn(plist):
        assign_params(p, plist)
        return ranking_objective(p, t.embeddings, pairs, weight_decay=1e-4)

    report = grad_check(fn, params_list(p), h=1e-5, rel_tol=1e-4)
    assert report.passed, report


def test_mse_objective_gradients_match_fd():
    t = generate_synthetic(
        SynthConfig(n_queries=4, n_models=3, embed_dim=6, tie_fraction=0.5, noise_seed=3)
    )
    p = init_equirouter(EquiHyper(d_q=6, n_models=3, d_m=4, latent_dim=8, seed=8))

    def fn(plist):
        assign_params(p, plist)
        return mse_objective(p, t.embeddings, t.perf)

    report = grad_check(fn, params_list(p), h=1e-5, rel_tol=1e-4)
    assert report.passed, report


# ---------------------------------------------------------------------------
# training


def separable_two_model_table(n=240, seed=1):
    """Winner is decided by the sign of the first embedding coordinate."""
    rng = make_rng(seed, 0)
    emb = rng.standard_normal((n, 4))
    winner = (emb[:, 0] > 0).astype(int)
    perf = np.where(np.arange(2)[None, :] == winner[:, None], 1.0, 0.0)
    cost = np.tile([1.0, 2.0], (n, 1))
    return make_table(perf=perf, cost=cost, embeddings=emb)


def test_initial_ranking_loss_at_symmetric_init():
    # with identical model embeddings every score ties, so the loss is ln 2
    # exactly; a fresh random init stays in the same neighborhood
    t = separable_two_model_table()
    pairs = build_pair_set(t, np.arange(t.n_queries))
    p = init_equirouter(tiny_hyper(4, 2, seed=0))
    loss_random, _ = ranking_objective(p, t.embeddings, pairs)
    assert loss_random == pytest.approx(math.log(2), abs=0.15)
    p.model_embeddings = np.tile(p.model_embeddings[0], (2, 1))
    loss_sym, _ = ranking_objective(p, t.embeddings, pairs)
    assert loss_sym == pytest.approx(math.log(2), abs=1e-9)


def test_train_equirouter_separable_ordering():
    t = separable_two_model_table()
    split = make_split(t.n_queries, (3, 1, 6), seed=42)
    params, log = train_equirouter(t, split, tiny_hyper(4, 2, epochs=200))
    train_idx = np.asarray(split.train)
    s = scores_batch(params, t.embeddings[train_idx])
    winner = np.argmax(t.perf[train_idx], axis=1)
    correct = np.mean(np.argmax(s, axis=1) == winner)
    assert correct >= 0.99
    assert log[-1].train_loss < log[0].train_loss


def test_train_equirouter_deterministic(tmp_path):
    t = separable_two_model_table(n=60)
    split = make_split(t.n_queries, (3, 1, 6), seed=42)
    hyper = tiny_hyper(4, 2, epochs=5)
    a, _ = train_equirouter(t, split, hyper)
    b, _ = train_equirouter(t, split, hyper)
    save_router(tmp_path / "a.ckpt", a)
    save_router(tmp_path / "b.ckpt", b)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_train_equirouter_no_supervision():
    t = make_table(perf=[[0.5, 0.5]] * 4, cost=[[1.0, 1.0]] * 4)
    split = make_split(4, (2, 1, 1), seed=0)
    with pytest.raises(ValueError, match="no ranking supervision"):
        train_equirouter(t, split, tiny_hyper(3, 2, epochs=2))


def test_mse_ablation_constant_targets():
    t = make_table(perf=np.full((50, 2), 0.5), cost=np.tile([1.0, 2.0], (50, 1)))
    split = make_split(50, (4, 1, 1), seed=0)
    params, log = train_mse_ablation(t, split, tiny_hyper(3, 2, epochs=800))
    s = scores_batch(params, t.embeddings[np.asarray(split.train)])
    assert np.abs(s - 0.5).max() < 0.02  # converged fit on the training queries
    assert log[-1].train_loss < 1e-4
    assert params.tag == "mse"


def test_mse_ablation_memorizes_tiny_table():
    rng = make_rng(33, 0)
    emb = np.eye(3)
    perf = rng.random((3, 2))
    t = make_table(perf=perf, cost=np.tile([1.0, 2.0], (3, 1)), embeddings=emb)
    params, _ = train_mse_ablation(
        t, (np.arange(3), np.array([], dtype=int)), tiny_hyper(3, 2, epochs=2500, learning_rate=1e-2)
    )
    s = scores_batch(params, emb)
    assert float(np.mean((s - perf) ** 2)) < 1e-4


def test_mse_ablation_deterministic(tmp_path):
    t = separable_two_model_table(n=60)
    split = make_split(t.n_queries, (3, 1, 6), seed=42)
    a, _ = train_mse_ablation(t, split, tiny_hyper(4, 2, epochs=5))
    b, _ = train_mse_ablation(t, split, tiny_hyper(4, 2, epochs=5))
    save_router(tmp_path / "a.ckpt", a)
    save_router(tmp_path / "b.ckpt", b)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_no_joint_ablation_head_width_and_tie():
    t = separable_two_model_table(n=60)
    split = make_split(t.n_queries, (3, 1, 6), seed=42)
    params, _ = train_no_joint_ablation(t, split, tiny_hyper(4, 2, epochs=2))
    assert params.score_head[0].in_dim == 2 * params.latent_dim
    assert params.tag == "equirouter_nojoint"
    params.model_embeddings = np.tile(params.model_embeddings[0], (2, 1))
    s = score_all(params, np.zeros(4))
    assert s[0] == s[1]


# ---------------------------------------------------------------------------
# cost predictor


def test_cost_predictor_constant_targets():
    cost = np.tile([2.0, 5.0], (80, 1))
    t = make_table(perf=np.random.default_rng(0).random((80, 2)), cost=cost)
    split = make_split(80, (4, 1, 3), seed=0)
    cp, log = train_cost_predictor(
        t,
        split,
        MlpHyper(d_q=3, n_models=2, hidden=8, epochs=1500, batch_size=64,
                 learning_rate=1e-2),
    )
    assert np.array_equal(cp.target_std, np.ones(2))  # degenerate stds clamped
    pred = predict_costs(cp, t.embeddings[np.asarray(split.train)])
    assert np.abs(pred - cost[0]).max() < 0.05  # bias-only solution on train
    assert log[-1].train_loss < 1e-4  # standardized MSE ~ 0


def test_cost_predictor_outputs_positive():
    t = make_table(
        perf=np.zeros((30, 2)),
        cost=np.full((30, 2), 1e-6),
    )
    split = make_split(30, (4, 1, 1), seed=0)
    cp, _ = train_cost_predictor(
        t, split, MlpHyper(d_q=3, n_models=2, hidden=4, epochs=5, batch_size=32)
    )
    assert (predict_costs(cp, t.embeddings) > 0).all()


def test_cost_predictor_learns_linear_costs_quick():
    rng = make_rng(44, 0)
    emb = rng.standard_normal((600, 6))
    W = rng.standard_normal((3, 6)) * 0.1
    cost = emb @ W.T + np.array([2.0, 4.0, 6.0])
    t = make_table(perf=rng.random((600, 3)), cost=cost, embeddings=emb)
    split = make_split(600, (3, 1, 6), seed=42)
    cp, _ = train_cost_predictor(
        t, split, MlpHyper(d_q=6, n_models=3, hidden=16, epochs=800, batch_size=4096)
    )
    test = np.asarray(split.test)
    mse = float(np.mean((predict_costs(cp, t.embeddings[test]) - t.cost[test]) ** 2))
    assert mse < 1e-3 * float(np.var(t.cost[test]))


# ---------------------------------------------------------------------------
# routing rule


def test_route_dominant_score():
    t = make_table(perf=[[0, 0]], cost=[[1.0, 1.0]])
    mlp, _ = train_mlp_router(
        t, (np.array([0]), np.array([], dtype=int)),
        MlpHyper(d_q=3, n_models=2, hidden=4, epochs=1, batch_size=8),
    )
    mlp.hidden_layer.weight = np.zeros_like(mlp.hidden_layer.weight)
    mlp.hidden_layer.bias = np.zeros_like(mlp.hidden_layer.bias)
    mlp.output_layer.weight = np.zeros_like(mlp.output_layer.weight)
    mlp.output_layer.bias = np.array([0.1, 0.9])
    d = route(mlp, t, 0, budget=5.0, cost_source="oracle")
    assert d.chosen == 1 and not d.feasible_clamped


def test_route_score_tie_breaks_by_cost():
    choice, clamped = select_under_budget(
        np.array([0.7, 0.7]), np.array([2.0, 1.0]), budget=5.0
    )
    assert choice == 1 and not clamped


def test_route_clamps_to_cheapest():
    choice, clamped = select_under_budget(
        np.array([0.1, 0.9]), np.array([3.0, 2.0]), budget=1.0
    )
    assert choice == 1 and clamped


def test_route_with_predicted_costs():
    t = make_table(perf=[[0.0, 1.0]] * 10, cost=[[1.0, 5.0]] * 10)
    split = make_split(10, (8, 1, 1), seed=0)
    cp, _ = train_cost_predictor(
        t, split, MlpHyper(d_q=3, n_models=2, hidden=8, epochs=500, batch_size=16,
                           learning_rate=1e-2)
    )
    d = route(OracleRouter(), t, 0, budget=2.0, cost_source="oracle")
    assert d.chosen == 0  # model 1 too expensive under true costs
    d = route(OracleRouter(), t, 0, budget=10.0, cost_source="oracle",
              cost_predictor=cp)
    assert d.chosen == 1 and d.predicted_costs == pytest.approx([1.0, 5.0])
    with pytest.raises(ValueError, match="requires a cost predictor"):
        route(train_knn_router(t, split, k=1), t, 0, budget=2.0,
              cost_source="predicted")


def test_route_invariant_to_increasing_transform():
    rng = make_rng(55, 0)
    for _ in range(20):
        s = rng.standard_normal(5)
        c = rng.random(5) + 0.1
        budget = float(rng.random() * 1.2)
        base, _ = select_under_budget(s, c, budget)
        squashed, _ = select_under_budget(np.tanh(s) * 3 + 1, c, budget)
        assert base == squashed


# ---------------------------------------------------------------------------
# baselines


def test_knn_k1_self_lookup(small_synth):
    split = make_split(small_synth.n_queries, (3, 1, 6), seed=42)
    knn = train_knn_router(small_synth, split, k=1)
    n = split.train[0]
    scores = knn_scores(knn, small_synth, small_synth.embeddings[[n]])
    assert np.array_equal(scores[0], small_synth.perf[n])


def test_knn_constant_labels():
    perf = np.tile([0.3, 0.8], (40, 1))
    t = make_table(perf=perf, cost=np.tile([1.0, 2.0], (40, 1)))
    split = make_split(40, (3, 1, 6), seed=42)
    knn = train_knn_router(t, split, k=5)
    scores = router_scores(knn, t, np.asarray(split.test))
    assert np.allclose(scores, [0.3, 0.8])


def test_mlp_memorization_agrees_with_oracle():
    t = generate_synthetic(
        SynthConfig(n_queries=200, n_models=3, embed_dim=10, tie_fraction=0.0,
                    margin_scale=0.4, cost_spread=5.0, noise_seed=12)
    )
    idx = np.arange(t.n_queries)
    mlp, _ = train_mlp_router(
        t, (idx, np.array([], dtype=int)),
        MlpHyper(d_q=10, n_models=3, hidden=32, epochs=800, batch_size=256, learning_rate=3e-3),
    )
    budget = float(t.cost.max())
    agree = np.mean(
        [route(mlp, t, n, budget).chosen == oracle_select(t, n, budget) for n in idx]
    )
    assert agree >= 0.95


# ---------------------------------------------------------------------------
# checkpoints


def test_router_checkpoint_round_trip(tmp_path, small_synth):
    split = make_split(small_synth.n_queries, (3, 1, 6), seed=42)
    hyper = tiny_hyper(small_synth.embed_dim, small_synth.n_models, epochs=2)
    params, _ = train_equirouter(small_synth, split, hyper)
    path = tmp_path / "r.ckpt"
    save_router(path, params)
    loaded = load_router(path)
    assert loaded.tag == "equirouter"
    x = small_synth.embeddings[0]
    assert score_all(loaded, x) == pytest.approx(score_all(params, x), rel=0, abs=0)


def test_all_router_kinds_round_trip(tmp_path, small_synth):
    split = make_split(small_synth.n_queries, (3, 1, 6), seed=42)
    idx = np.asarray(split.test)[:5]
    hyper = tiny_hyper(small_synth.embed_dim, small_synth.n_models, epochs=2)
    mhyper = MlpHyper(d_q=small_synth.embed_dim, n_models=small_synth.n_models,
                      hidden=8, epochs=2, batch_size=64)
    routers = {
        "equirouter_nojoint": train_no_joint_ablation(small_synth, split, hyper)[0],
        "mse": train_mse_ablation(small_synth, split, hyper)[0],
        "mlp": train_mlp_router(small_synth, split, mhyper)[0],
        "knn": train_knn_router(small_synth, split, k=3),
    }
    for tag, router in routers.items():
        path = tmp_path / f"{tag}.ckpt"
        save_router(path, router)
        loaded = load_router(path)
        assert loaded.tag == tag
        assert np.array_equal(
            router_scores(loaded, small_synth, idx),
            router_scores(router, small_synth, idx),
        )
    cp, _ = train_cost_predictor(small_synth, split, mhyper)
    save_cost_predictor(tmp_path / "cost.ckpt", cp)
    loaded_cp = load_router(tmp_path / "cost.ckpt")
    assert loaded_cp.tag == "cost"
    assert np.array_equal(
        predict_costs(loaded_cp, small_synth.embeddings[idx]),
        predict_costs(cp, small_synth.embeddings[idx]),
    )
