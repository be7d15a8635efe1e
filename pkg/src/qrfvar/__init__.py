"""Real-time conditional VaR with quantile regression forests and split-conformal calibration."""

__version__ = "0.1.0"

from .conformal import (  # noqa: E402
    ConformalModel,
    ConstantQuantileModel,
    SplitPlan,
    calibrate,
    calibrated_offset,
    conformal_predict,
    conformity_scores,
    fit_conformal_forest,
    split_dataset,
)
from .forest import (  # noqa: E402
    Forest,
    ForestConfig,
    Tree,
    fit_forest,
    fit_tree,
    forest_weights,
    predict_cdf,
    predict_quantile,
    tree_weights,
)
from .market import (  # noqa: E402
    MarketConfig,
    OfflineDataset,
    bs_call,
    build_covariance_factor,
    conditional_losses,
    generate_offline_dataset,
    ground_truth_var,
    loss_closed_form,
    loss_nested,
    paper_market_config,
    portfolio_value_0,
    simulate_to_horizon,
)
from .metrics import EvalGrid, MetricRecord, coverage_rate, mpl, mrise, pinball  # noqa: E402
