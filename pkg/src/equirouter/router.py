"""Routers: the EquiRouter ranking network, its ablations, kNN/MLP baselines,
and the shared cost predictor. All expose one decision interface.

EquiRouter scores every candidate model for a query q with embedding x:

    z      = trunk(x)                         shared query features, dim D
    [g; b] = film(m_j)                        per-model scale and shift
    z_j    = g * z + b                        model-conditioned features
    e_j    = proj(m_j)                        projected model vector, dim D
    h_j    = [z_j, e_j, z_j * e_j, |z_j - e_j|]
    s_j    = head(h_j)

where m_j is a learned embedding per model. Training supervises the score
ordering with a pairwise logistic loss over the per-query ordered pairs
(higher performance wins; equal performance, cheaper wins), so the objective
matches the argmax decision made at deployment. The "no joint feature"
ablation feeds [z_j, e_j] to the head; the "mse" ablation keeps the
architecture but regresses s_j onto the raw performance values.

Backpropagation is hand-derived and exact; see tests for finite-difference
verification of every path.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import RoutingTable, SplitIndices
from .neuralnet import (
    DenseLayer,
    adam_step,
    forward,
    init_adam,
    init_dense,
    load_checkpoint,
    save_checkpoint,
)
from .oracle import select_under_budget
from .rng import STREAM_INIT, STREAM_SHUFFLE, make_rng

COST_FLOOR = float(np.finfo(np.float64).tiny)

# splits are either a SplitIndices or a raw (train, valid) index pair; the
# latter lets training-set evaluation train on every query
def _train_valid_arrays(split) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(split, SplitIndices):
        train, valid = split.train, split.valid
    else:
        train, valid = split
    return (
        np.asarray(train, dtype=np.int64),
        np.asarray(valid, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EquiHyper:
    """EquiRouter sizes and training schedule."""

    d_q: int
    n_models: int
    d_m: int = 64
    latent_dim: int = 128
    weight_decay: float = 1e-4
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 2048
    seed: int = 0


@dataclass(frozen=True)
class MlpHyper:
    """Two-layer regressor sizes (cost predictor and MLP baseline)."""

    d_q: int
    n_models: int
    hidden: int = 64
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 2048
    seed: int = 0


# ---------------------------------------------------------------------------
# parameters


@dataclass
class EquiRouterParams:
    model_embeddings: np.ndarray  # (K, d_m)
    trunk: list[DenseLayer]  # d_q -> D -> D, relu
    film_proj: DenseLayer  # d_m -> 2D, linear
    model_proj: DenseLayer  # d_m -> D, linear
    score_head: list[DenseLayer]  # (4D or 2D) -> D -> 1, relu hidden
    hyper: EquiHyper
    joint_feature: bool = True
    tag: str = "equirouter"  # checkpoint tag: equirouter | equirouter_nojoint | mse

    @property
    def latent_dim(self) -> int:
        return self.trunk[-1].out_dim


def init_equirouter(
    hyper: EquiHyper, joint_feature: bool = True, tag: str | None = None
) -> EquiRouterParams:
    rng = make_rng(hyper.seed, STREAM_INIT)
    D, d_m = hyper.latent_dim, hyper.d_m
    emb_limit = np.sqrt(6.0 / (d_m + d_m))
    model_embeddings = rng.uniform(-emb_limit, emb_limit, size=(hyper.n_models, d_m))
    trunk = [
        init_dense(rng, hyper.d_q, D, "relu"),
        init_dense(rng, D, D, "relu"),
    ]
    film_proj = init_dense(rng, d_m, 2 * D)
    model_proj = init_dense(rng, d_m, D)
    head_in = 4 * D if joint_feature else 2 * D
    score_head = [init_dense(rng, head_in, D, "relu"), init_dense(rng, D, 1)]
    if tag is None:
        tag = "equirouter" if joint_feature else "equirouter_nojoint"
    return EquiRouterParams(
        model_embeddings=model_embeddings,
        trunk=trunk,
        film_proj=film_proj,
        model_proj=model_proj,
        score_head=score_head,
        hyper=hyper,
        joint_feature=joint_feature,
        tag=tag,
    )


def params_list(p: EquiRouterParams) -> list[np.ndarray]:
    """Canonical flat parameter order shared by Adam, grad checks, checkpoints."""
    out = [p.model_embeddings]
    for layer in [*p.trunk, p.film_proj, p.model_proj, *p.score_head]:
        out.extend([layer.weight, layer.bias])
    return out


def assign_params(p: EquiRouterParams, values: list[np.ndarray]) -> None:
    it = iter(values)
    p.model_embeddings = next(it)
    for layer in [*p.trunk, p.film_proj, p.model_proj, *p.score_head]:
        layer.weight = next(it)
        layer.bias = next(it)


# ---------------------------------------------------------------------------
# forward / backward


def film_modulate(z: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Elementwise affine modulation gamma * z + beta."""
    z, gamma, beta = (np.asarray(v, dtype=np.float64) for v in (z, gamma, beta))
    if not (z.shape == gamma.shape == beta.shape):
        raise ValueError(
            f"dimension mismatch: z {z.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    return gamma * z + beta


def joint_feature(z_j: np.ndarray, e_j: np.ndarray) -> np.ndarray:
    """Interaction feature [z_j, e_j, z_j * e_j, |z_j - e_j|], length 4D."""
    z_j = np.asarray(z_j, dtype=np.float64)
    e_j = np.asarray(e_j, dtype=np.float64)
    if z_j.shape != e_j.shape:
        raise ValueError(f"dimension mismatch: {z_j.shape} vs {e_j.shape}")
    return np.concatenate([z_j, e_j, z_j * e_j, np.abs(z_j - e_j)])


def _forward_scores(p: EquiRouterParams, Q: np.ndarray):
    """Batched scores (B, K) plus the cache needed for the backward pass."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != p.hyper.d_q:
        raise ValueError(f"query batch shape {Q.shape} does not match d_q={p.hyper.d_q}")
    B = Q.shape[0]
    K = p.model_embeddings.shape[0]
    D = p.latent_dim

    trunk_inputs = []
    h = Q
    for layer in p.trunk:
        trunk_inputs.append(h)
        h = forward(layer, h)
    Z = h  # (B, D)

    M = p.model_embeddings
    G = forward(p.film_proj, M)  # (K, 2D)
    gamma, beta = G[:, :D], G[:, D:]
    E = forward(p.model_proj, M)  # (K, D)

    Zj = Z[:, None, :] * gamma[None, :, :] + beta[None, :, :]  # (B, K, D)
    if p.joint_feature:
        H = np.concatenate(
            [
                Zj,
                np.broadcast_to(E[None, :, :], (B, K, D)),
                Zj * E[None, :, :],
                np.abs(Zj - E[None, :, :]),
            ],
            axis=2,
        )
    else:
        H = np.concatenate([Zj, np.broadcast_to(E[None, :, :], (B, K, D))], axis=2)

    head_inputs = []
    h = H.reshape(B * K, -1)
    for layer in p.score_head:
        head_inputs.append(h)
        h = forward(layer, h)
    scores = h.reshape(B, K)
    cache = (Q, trunk_inputs, Z, gamma, beta, E, Zj, head_inputs)
    return scores, cache


def _backward_scores(p: EquiRouterParams, cache, dS: np.ndarray) -> list[np.ndarray]:
    """Gradients of sum(dS * scores) w.r.t. every parameter, canonical order."""
    Q, trunk_inputs, Z, gamma, beta, E, Zj, head_inputs = cache
    B, K = dS.shape
    D = p.latent_dim

    g = dS.reshape(B * K, 1)
    head_grads = []
    for layer, x in zip(reversed(p.score_head), reversed(head_inputs)):
        if layer.activation == "relu":
            z = x @ layer.weight.T + layer.bias
            g = g * (z > 0.0)
        head_grads.append((g.T @ x, g.sum(axis=0)))
        g = g @ layer.weight
    head_grads.reverse()
    dH = g.reshape(B, K, -1)

    dZj = dH[:, :, :D].copy()
    dE_b = dH[:, :, D : 2 * D].copy()
    if p.joint_feature:
        dU = dH[:, :, 2 * D : 3 * D]
        dV = dH[:, :, 3 * D :]
        dZj += dU * E[None, :, :]
        dE_b += dU * Zj
        sign = np.sign(Zj - E[None, :, :])
        dZj += dV * sign
        dE_b -= dV * sign

    dE = dE_b.sum(axis=0)  # (K, D)
    dGamma = (dZj * Z[:, None, :]).sum(axis=0)  # (K, D)
    dBeta = dZj.sum(axis=0)  # (K, D)
    dZ = (dZj * gamma[None, :, :]).sum(axis=1)  # (B, D)

    M = p.model_embeddings
    dG = np.concatenate([dGamma, dBeta], axis=1)  # (K, 2D)
    film_w_grad = dG.T @ M
    film_b_grad = dG.sum(axis=0)
    dM = dG @ p.film_proj.weight
    proj_w_grad = dE.T @ M
    proj_b_grad = dE.sum(axis=0)
    dM = dM + dE @ p.model_proj.weight

    g = dZ
    trunk_grads = []
    for layer, x in zip(reversed(p.trunk), reversed(trunk_inputs)):
        if layer.activation == "relu":
            z = x @ layer.weight.T + layer.bias
            g = g * (z > 0.0)
        trunk_grads.append((g.T @ x, g.sum(axis=0)))
        g = g @ layer.weight
    trunk_grads.reverse()

    grads: list[np.ndarray] = [dM]
    for gw, gb in trunk_grads:
        grads.extend([gw, gb])
    grads.extend([film_w_grad, film_b_grad, proj_w_grad, proj_b_grad])
    for gw, gb in head_grads:
        grads.extend([gw, gb])
    return grads


def scores_batch(p: EquiRouterParams, Q: np.ndarray) -> np.ndarray:
    s, _ = _forward_scores(p, Q)
    return s


def score_all(p: EquiRouterParams, q_embed: np.ndarray) -> np.ndarray:
    """Score vector s(q) of length K for a single query embedding."""
    q_embed = np.asarray(q_embed, dtype=np.float64)
    if q_embed.ndim != 1:
        raise ValueError("q_embed must be a single vector")
    return scores_batch(p, q_embed[None, :])[0]


def per_query_mac_counts(p: EquiRouterParams) -> tuple[int, int]:
    """(trunk_macs, per_model_macs): multiply-accumulate counts per query.

    The trunk runs once per query regardless of K; per model the router
    applies the modulation, the interaction blocks and the scoring head.
    The film/proj projections depend only on the model embeddings and are
    computed once per scoring call, so they amortize to zero per query.
    """
    trunk = sum(l.in_dim * l.out_dim for l in p.trunk)
    D = p.latent_dim
    per_model = D  # gamma * z + beta
    if p.joint_feature:
        per_model += 2 * D  # z_j * e_j and |z_j - e_j|
    per_model += sum(l.in_dim * l.out_dim for l in p.score_head)
    return trunk, per_model


# ---------------------------------------------------------------------------
# ranking supervision


def build_pairs(a: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Ordered index pairs (i, j) with i ranked above j for one query.

    i outranks j iff a_i > a_j, or a_i == a_j and c_i < c_j. Returned as an
    (P, 2) int array; at most one direction per unordered pair, never (i,i).
    """
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if a.shape != c.shape or a.ndim != 1:
        raise ValueError("performance and cost rows must be equal-length vectors")
    better = a[:, None] > a[None, :]
    cheaper_tie = (a[:, None] == a[None, :]) & (c[:, None] < c[None, :])
    return np.argwhere(better | cheaper_tie)


def build_pair_set(table: RoutingTable, indices: np.ndarray) -> list[np.ndarray]:
    """Per-query ordered pair arrays for the given query indices."""
    return [build_pairs(table.perf[n], table.cost[n]) for n in indices]


def ranking_loss(scores: np.ndarray, pairs: np.ndarray) -> float:
    """Mean logistic pair loss (1/|P|) sum log(1 + exp(-(s_i - s_j))).

    Stable via log1p-exp for score gaps up to ~1e3. An empty pair set
    contributes 0 and is excluded from batch means by callers.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        return 0.0
    t = scores[pairs[:, 0]] - scores[pairs[:, 1]]
    return float(np.mean(np.logaddexp(0.0, -t)))


def _flatten_pairs(pairs_list: list[np.ndarray]):
    """Flat (query_row, i, j, weight) arrays; weight = 1/(n_contrib * |P_q|)."""
    contributing = [q for q, pr in enumerate(pairs_list) if len(pr)]
    qidx, ii, jj, w = [], [], [], []
    for q in contributing:
        pr = pairs_list[q]
        qidx.append(np.full(len(pr), q))
        ii.append(pr[:, 0])
        jj.append(pr[:, 1])
        w.append(np.full(len(pr), 1.0 / (len(contributing) * len(pr))))
    if not contributing:
        return None
    return (
        np.concatenate(qidx),
        np.concatenate(ii),
        np.concatenate(jj),
        np.concatenate(w),
    )


def ranking_objective(
    p: EquiRouterParams,
    Q: np.ndarray,
    pairs_list: list[np.ndarray],
    weight_decay: float = 0.0,
) -> tuple[float, list[np.ndarray]]:
    """Mean per-query pairwise logistic loss plus 0.5 * wd * ||theta||^2.

    Returns (loss, exact analytic gradients in canonical parameter order).
    Queries with empty pair sets are excluded from the mean.
    """
    flat = _flatten_pairs(pairs_list)
    if flat is None:
        raise ValueError("no ranking supervision: every query has an empty pair set")
    qidx, ii, jj, w = flat
    S, cache = _forward_scores(p, Q)
    t = S[qidx, ii] - S[qidx, jj]
    loss = float(np.sum(w * np.logaddexp(0.0, -t)))
    sig = np.exp(-np.logaddexp(0.0, t))  # sigmoid(-t), overflow-free
    dS = np.zeros_like(S)
    np.add.at(dS, (qidx, ii), -w * sig)
    np.add.at(dS, (qidx, jj), w * sig)
    grads = _backward_scores(p, cache, dS)
    if weight_decay:
        plist = params_list(p)
        loss += 0.5 * weight_decay * sum(float(np.sum(v * v)) for v in plist)
        grads = [g + weight_decay * v for g, v in zip(grads, plist)]
    return loss, grads


def mse_objective(
    p: EquiRouterParams, Q: np.ndarray, targets: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Mean squared error of scores against per-model targets, with gradients."""
    S, cache = _forward_scores(p, Q)
    diff = S - targets
    loss = float(np.mean(diff * diff))
    dS = 2.0 * diff / diff.size
    return loss, _backward_scores(p, cache, dS)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    train_loss: float
    val_loss: float


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    size = min(batch_size, n)
    return [order[i : i + size] for i in range(0, n, size)]


def train_equirouter(
    table: RoutingTable,
    split,
    hyper: EquiHyper | None = None,
    joint_feature: bool = True,
) -> tuple[EquiRouterParams, list[TrainLogRow]]:
    """Minibatch Adam on the pairwise ranking loss with decoupled l2 decay.

    Logs train and validation loss per epoch and returns the parameters of
    the epoch with the lowest validation loss (last epoch when there is no
    validation signal). Bit-reproducible for a fixed seed.
    """
    if hyper is None:
        hyper = EquiHyper(d_q=table.embed_dim, n_models=table.n_models)
    train_idx, valid_idx = _train_valid_arrays(split)
    return _train_scores(
        table, train_idx, valid_idx, hyper, joint_feature=joint_feature, objective="rank"
    )


def train_no_joint_ablation(
    table: RoutingTable, split, hyper: EquiHyper | None = None
) -> tuple[EquiRouterParams, list[TrainLogRow]]:
    """Ablation: scoring head sees [z_j, e_j] only (no interaction blocks)."""
    return train_equirouter(table, split, hyper, joint_feature=False)


def train_mse_ablation(
    table: RoutingTable, split, hyper: EquiHyper | None = None
) -> tuple[EquiRouterParams, list[TrainLogRow]]:
    """Ablation: same architecture, scores regressed onto raw performance."""
    if hyper is None:
        hyper = EquiHyper(d_q=table.embed_dim, n_models=table.n_models)
    train_idx, valid_idx = _train_valid_arrays(split)
    return _train_scores(
        table, train_idx, valid_idx, hyper, joint_feature=True, objective="mse"
    )


def _train_scores(
    table: RoutingTable,
    train_idx: np.ndarray,
    valid_idx: np.ndarray,
    hyper: EquiHyper,
    joint_feature: bool,
    objective: str,
) -> tuple[EquiRouterParams, list[TrainLogRow]]:
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    if objective == "rank":
        all_pairs = build_pair_set(table, train_idx)
        keep = np.array([len(pr) > 0 for pr in all_pairs])
        if not keep.any():
            raise ValueError("no ranking supervision: every query has an empty pair set")
        train_idx = train_idx[keep]
        train_pairs = [pr for pr in all_pairs if len(pr)]
        vp_all = build_pair_set(table, valid_idx)
        valid_pairs = [pr for pr in vp_all if len(pr)]
        valid_q = table.embeddings[
            valid_idx[[i for i, pr in enumerate(vp_all) if len(pr)]]
        ]
    else:
        train_pairs = None
        valid_pairs = []
        valid_q = table.embeddings[valid_idx]

    tag = {("rank", True): "equirouter", ("rank", False): "equirouter_nojoint"}.get(
        (objective, joint_feature), "mse"
    )
    params = init_equirouter(hyper, joint_feature=joint_feature, tag=tag)
    plist = params_list(params)
    adam = init_adam(
        plist, learning_rate=hyper.learning_rate, weight_decay=hyper.weight_decay
    )
    Q_train = table.embeddings[train_idx]
    A_train = table.perf[train_idx]

    def val_loss() -> float:
        if objective == "rank":
            if not valid_pairs:
                return float("nan")
            S = scores_batch(params, valid_q)
            return float(
                np.mean([ranking_loss(S[q], pr) for q, pr in enumerate(valid_pairs)])
            )
        if valid_q.shape[0] == 0:
            return float("nan")
        S = scores_batch(params, valid_q)
        diff = S - table.perf[valid_idx]
        return float(np.mean(diff * diff))

    log: list[TrainLogRow] = []
    best = (np.inf, [v.copy() for v in plist])
    for epoch in range(hyper.epochs):
        rng = make_rng(hyper.seed, STREAM_SHUFFLE, epoch)
        total, count = 0.0, 0
        for batch in _batches(train_idx.size, hyper.batch_size, rng):
            if objective == "rank":
                loss, grads = ranking_objective(
                    params, Q_train[batch], [train_pairs[b] for b in batch]
                )
            else:
                loss, grads = mse_objective(params, Q_train[batch], A_train[batch])
            plist = adam_step(adam, plist, grads)
            assign_params(params, plist)
            total += loss * batch.size
            count += batch.size
        vl = val_loss()
        log.append(TrainLogRow(epoch=epoch, train_loss=total / count, val_loss=vl))
        if np.isfinite(vl) and vl < best[0]:
            best = (vl, [v.copy() for v in plist])
    if np.isfinite(best[0]):
        assign_params(params, best[1])
    return params, log


# ---------------------------------------------------------------------------
# two-layer regressors: cost predictor and MLP baseline


@dataclass
class CostPredictorParams:
    """Two-layer MLP predicting per-model costs from the query embedding.

    Targets are standardized with training-split statistics; predictions are
    de-standardized and floored at the smallest positive float at inference.
    A model whose training costs are constant gets std clamped to 1 (mean-only
    standardization).
    """

    hidden_layer: DenseLayer  # d_q -> H, relu
    output_layer: DenseLayer  # H -> K, linear
    target_mean: np.ndarray  # (K,)
    target_std: np.ndarray  # (K,)
    hyper: MlpHyper
    tag: str = "cost"


@dataclass
class MlpRouterParams:
    """Baseline: two-layer MLP regressing per-model performance."""

    hidden_layer: DenseLayer
    output_layer: DenseLayer
    hyper: MlpHyper
    tag: str = "mlp"


def _init_two_layer(hyper: MlpHyper) -> tuple[DenseLayer, DenseLayer]:
    rng = make_rng(hyper.seed, STREAM_INIT)
    return (
        init_dense(rng, hyper.d_q, hyper.hidden, "relu"),
        init_dense(rng, hyper.hidden, hyper.n_models),
    )


def _two_layer_forward(l1: DenseLayer, l2: DenseLayer, Q: np.ndarray) -> np.ndarray:
    return forward(l2, forward(l1, Q))


def _train_two_layer(
    Q_train: np.ndarray,
    T_train: np.ndarray,
    Q_valid: np.ndarray,
    T_valid: np.ndarray,
    hyper: MlpHyper,
) -> tuple[DenseLayer, DenseLayer, list[TrainLogRow]]:
    l1, l2 = _init_two_layer(hyper)
    plist = [l1.weight, l1.bias, l2.weight, l2.bias]
    adam = init_adam(plist, learning_rate=hyper.learning_rate)

    def mse_and_grads(batch_q, batch_t):
        h = forward(l1, batch_q)
        y = forward(l2, h)
        diff = y - batch_t
        loss = float(np.mean(diff * diff))
        g = 2.0 * diff / diff.size
        gx2, gw2, gb2 = ((g @ l2.weight), (g.T @ h), g.sum(0))
        z1 = batch_q @ l1.weight.T + l1.bias
        g1 = gx2 * (z1 > 0.0)
        gw1, gb1 = g1.T @ batch_q, g1.sum(0)
        return loss, [gw1, gb1, gw2, gb2]

    log: list[TrainLogRow] = []
    best = (np.inf, [v.copy() for v in plist])
    n = Q_train.shape[0]
    for epoch in range(hyper.epochs):
        rng = make_rng(hyper.seed, STREAM_SHUFFLE, epoch)
        total, count = 0.0, 0
        for batch in _batches(n, hyper.batch_size, rng):
            loss, grads = mse_and_grads(Q_train[batch], T_train[batch])
            plist = adam_step(adam, plist, grads)
            l1.weight, l1.bias, l2.weight, l2.bias = plist
            total += loss * batch.size
            count += batch.size
        if Q_valid.shape[0]:
            diff = _two_layer_forward(l1, l2, Q_valid) - T_valid
            vl = float(np.mean(diff * diff))
        else:
            vl = float("nan")
        log.append(TrainLogRow(epoch=epoch, train_loss=total / count, val_loss=vl))
        if np.isfinite(vl) and vl < best[0]:
            best = (vl, [v.copy() for v in plist])
    if np.isfinite(best[0]):
        l1.weight, l1.bias, l2.weight, l2.bias = best[1]
    return l1, l2, log


def train_cost_predictor(
    table: RoutingTable, split, hyper: MlpHyper | None = None
) -> tuple[CostPredictorParams, list[TrainLogRow]]:
    if hyper is None:
        hyper = MlpHyper(d_q=table.embed_dim, n_models=table.n_models)
    train_idx, valid_idx = _train_valid_arrays(split)
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    costs = table.cost[train_idx]
    mean = costs.mean(axis=0)
    std = costs.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    l1, l2, log = _train_two_layer(
        table.embeddings[train_idx],
        (costs - mean) / std,
        table.embeddings[valid_idx],
        (table.cost[valid_idx] - mean) / std,
        hyper,
    )
    return (
        CostPredictorParams(
            hidden_layer=l1,
            output_layer=l2,
            target_mean=mean,
            target_std=std,
            hyper=hyper,
        ),
        log,
    )


def predict_costs(cp: CostPredictorParams, Q: np.ndarray) -> np.ndarray:
    """De-standardized cost predictions, floored at the smallest positive float."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    y = _two_layer_forward(cp.hidden_layer, cp.output_layer, Q)
    return np.maximum(y * cp.target_std + cp.target_mean, COST_FLOOR)


def train_mlp_router(
    table: RoutingTable, split, hyper: MlpHyper | None = None
) -> tuple[MlpRouterParams, list[TrainLogRow]]:
    if hyper is None:
        hyper = MlpHyper(d_q=table.embed_dim, n_models=table.n_models)
    train_idx, valid_idx = _train_valid_arrays(split)
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    l1, l2, log = _train_two_layer(
        table.embeddings[train_idx],
        table.perf[train_idx],
        table.embeddings[valid_idx],
        table.perf[valid_idx],
        hyper,
    )
    return MlpRouterParams(hidden_layer=l1, output_layer=l2, hyper=hyper), log


# ---------------------------------------------------------------------------
# kNN baseline and oracle sentinel


@dataclass(frozen=True)
class KnnRouterParams:
    """Non-parametric baseline: mean perf row of the k nearest train queries."""

    k: int
    train_indices: tuple[int, ...]
    split_seed: int
    tag: str = "knn"


def train_knn_router(table: RoutingTable, split, k: int = 50) -> KnnRouterParams:
    if k < 1:
        raise ValueError("k must be >= 1")
    train_idx, _ = _train_valid_arrays(split)
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    return KnnRouterParams(
        k=int(k),
        train_indices=tuple(int(i) for i in train_idx),
        split_seed=int(getattr(split, "seed", 0)),
    )


def knn_scores(knn: KnnRouterParams, table: RoutingTable, Q: np.ndarray) -> np.ndarray:
    train_idx = np.asarray(knn.train_indices, dtype=np.int64)
    ref = table.embeddings[train_idx]
    k = min(knn.k, train_idx.size)
    # |q - r|^2 via the gemm expansion: O(B * n_train) memory, and a query
    # equal to a training row still gets distance exactly 0 (x + x - 2x)
    q_sq = (Q * Q).sum(axis=1, keepdims=True)
    r_sq = (ref * ref).sum(axis=1)
    d2 = q_sq + r_sq[None, :] - 2.0 * (Q @ ref.T)
    # stable sort: distance ties resolve to the earlier training row
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return table.perf[train_idx[nearest]].mean(axis=1)


@dataclass(frozen=True)
class OracleRouter:
    """Sentinel router scoring each model by its true performance."""

    tag: str = "oracle"


Router = EquiRouterParams | MlpRouterParams | KnnRouterParams | OracleRouter


# ---------------------------------------------------------------------------
# uniform decision interface


@dataclass(frozen=True)
class RouterDecision:
    query_index: int
    budget: float
    chosen: int
    scores: np.ndarray  # (K,)
    predicted_costs: np.ndarray  # (K,) costs used for the feasibility filter
    feasible_clamped: bool


def router_scores(
    router: Router, table: RoutingTable, indices: np.ndarray
) -> np.ndarray:
    """Score matrix (len(indices), K) under the uniform router interface."""
    indices = np.asarray(indices, dtype=np.int64)
    if isinstance(router, OracleRouter):
        return table.perf[indices]
    if isinstance(router, EquiRouterParams):
        return scores_batch(router, table.embeddings[indices])
    if isinstance(router, MlpRouterParams):
        return _two_layer_forward(
            router.hidden_layer, router.output_layer, table.embeddings[indices]
        )
    if isinstance(router, KnnRouterParams):
        return knn_scores(router, table, table.embeddings[indices])
    raise TypeError(f"unknown router type {type(router)!r}")


def filter_costs(
    router: Router,
    table: RoutingTable,
    indices: np.ndarray,
    cost_source: str,
    cost_predictor: CostPredictorParams | None = None,
) -> np.ndarray:
    """Costs used for the budget filter: true costs or predictor output."""
    indices = np.asarray(indices, dtype=np.int64)
    if cost_source == "oracle" or isinstance(router, OracleRouter):
        return table.cost[indices]
    if cost_source == "predicted":
        if cost_predictor is None:
            raise ValueError("cost_source='predicted' requires a cost predictor")
        return predict_costs(cost_predictor, table.embeddings[indices])
    raise ValueError(f"unknown cost_source {cost_source!r}")


def route(
    router: Router,
    table: RoutingTable,
    n: int,
    budget: float,
    cost_source: str = "oracle",
    cost_predictor: CostPredictorParams | None = None,
) -> RouterDecision:
    """Budget-filtered selection: argmax score, ties to cheaper then lower index."""
    idx = np.array([n], dtype=np.int64)
    scores = router_scores(router, table, idx)[0]
    costs = filter_costs(router, table, idx, cost_source, cost_predictor)[0]
    chosen, clamped = select_under_budget(scores, costs, budget)
    return RouterDecision(
        query_index=int(n),
        budget=float(budget),
        chosen=chosen,
        scores=scores,
        predicted_costs=costs,
        feasible_clamped=clamped,
    )


# ---------------------------------------------------------------------------
# checkpoints


def _hyper_dict(h) -> dict:
    return {k: getattr(h, k) for k in h.__dataclass_fields__}


def save_router(path: Path | str, router: Router) -> None:
    if isinstance(router, EquiRouterParams):
        header = {
            "router_type": router.tag,
            "joint_feature": router.joint_feature,
            "hyper": _hyper_dict(router.hyper),
        }
        save_checkpoint(path, header, params_list(router))
    elif isinstance(router, MlpRouterParams):
        header = {"router_type": "mlp", "hyper": _hyper_dict(router.hyper)}
        save_checkpoint(
            path,
            header,
            [
                router.hidden_layer.weight,
                router.hidden_layer.bias,
                router.output_layer.weight,
                router.output_layer.bias,
            ],
        )
    elif isinstance(router, KnnRouterParams):
        header = {
            "router_type": "knn",
            "k": router.k,
            "split_seed": router.split_seed,
            "train_indices": list(router.train_indices),
        }
        save_checkpoint(path, header, [])
    elif isinstance(router, OracleRouter):
        save_checkpoint(path, {"router_type": "oracle"}, [])
    else:
        raise TypeError(f"cannot checkpoint router type {type(router)!r}")


def save_cost_predictor(path: Path | str, cp: CostPredictorParams) -> None:
    header = {"router_type": "cost", "hyper": _hyper_dict(cp.hyper)}
    save_checkpoint(
        path,
        header,
        [
            cp.hidden_layer.weight,
            cp.hidden_layer.bias,
            cp.output_layer.weight,
            cp.output_layer.bias,
            cp.target_mean,
            cp.target_std,
        ],
    )


def load_router(path: Path | str):
    """Load any checkpoint written by save_router or save_cost_predictor."""
    header, params = load_checkpoint(path)
    kind = header["router_type"]
    if kind in ("equirouter", "equirouter_nojoint", "mse"):
        hyper = EquiHyper(**header["hyper"])
        router = init_equirouter(
            hyper, joint_feature=bool(header["joint_feature"]), tag=kind
        )
        assign_params(router, params)
        return router
    if kind == "mlp":
        hyper = MlpHyper(**header["hyper"])
        w1, b1, w2, b2 = params
        return MlpRouterParams(
            hidden_layer=DenseLayer(w1, b1, "relu"),
            output_layer=DenseLayer(w2, b2, "identity"),
            hyper=hyper,
        )
    if kind == "knn":
        return KnnRouterParams(
            k=int(header["k"]),
            train_indices=tuple(header["train_indices"]),
            split_seed=int(header["split_seed"]),
        )
    if kind == "cost":
        hyper = MlpHyper(**header["hyper"])
        w1, b1, w2, b2, mean, std = params
        return CostPredictorParams(
            hidden_layer=DenseLayer(w1, b1, "relu"),
            output_layer=DenseLayer(w2, b2, "identity"),
            target_mean=mean,
            target_std=std,
            hyper=hyper,
        )
    if kind == "oracle":
        return OracleRouter()
    raise ValueError(f"unknown router_type {kind!r} in checkpoint")
