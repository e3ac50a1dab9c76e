from .collection import CollectionSchedule, adapt_interval
from .coordination import InfeasibleSchedule, Window, max_concurrency, schedule_background
from .knapsack import PromotionSet, select_promotion_set
from .manager import DEFAULT_RULES, ClusterManager, EventLog
from .paging import PagingDecision, ProcessHistory, RunRecord, Thresholds, classify_paging
from .presets import (
    CompactionDecision, PagingModeDecision, PresetConflict, PromotionDecision, compile_preset,
)
from .search import (
    ExperimentPlan, RegionEstimate, plan_round, run_search, split_region, update_estimates,
)
