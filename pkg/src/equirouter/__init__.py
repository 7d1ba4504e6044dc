"""Budget-constrained model routing: data model, oracle rule, EquiRouter,
baselines, cost predictor, and the evaluation/diagnostics suite."""

from .dataset import (
    ModelInfo,
    RoutingTable,
    SplitIndices,
    SynthConfig,
    generate_synthetic,
    load_split,
    load_table,
    make_split,
    save_split,
    save_table,
)
from .evaluation import (
    CollapseReport,
    MetricsSummary,
    SweepCurve,
    budget_grid,
    call_rate_curve,
    metrics_summary,
    nauc,
    noise_sensitivity,
    peak_score,
    qnc,
    qnc_from_curve,
    rci,
    sweep,
    training_set_eval,
)
from .neuralnet import (
    AdamState,
    DenseLayer,
    adam_step,
    backward,
    forward,
    grad_check,
    init_adam,
    init_dense,
    load_checkpoint,
    save_checkpoint,
)
from .oracle import (
    FeasibleSet,
    MarginStats,
    NoiseConfig,
    feasible_set,
    inject_noise,
    margin,
    margin_stats,
    mc_selection_frequencies,
    oracle_select,
)
from .router import (
    CostPredictorParams,
    EquiHyper,
    EquiRouterParams,
    KnnRouterParams,
    MlpHyper,
    MlpRouterParams,
    OracleRouter,
    RouterDecision,
    build_pairs,
    film_modulate,
    init_equirouter,
    joint_feature,
    load_router,
    predict_costs,
    ranking_loss,
    route,
    save_router,
    score_all,
    train_cost_predictor,
    train_equirouter,
    train_knn_router,
    train_mlp_router,
    train_mse_ablation,
    train_no_joint_ablation,
)

__all__ = [name for name in dir() if not name.startswith("_")]
