"""Metrics, classical baselines, and the cross-validation harness."""
from .baselines import DecisionTree, RandomForest, forest_predict, knn_predict, tree_predict
from .harness import (
    BASELINES,
    CurvePoint,
    EvalProtocol,
    EvalTask,
    MetricReport,
    MetricRow,
    TaskError,
    curve_to_csv,
    evaluate_model,
    learning_curve,
    load_csv_task,
    load_model,
    synthetic_tasks,
)
from .metrics import UndefinedMetricError, accuracy, roc_auc, stratified_kfold, stratified_subsample

__all__ = [
    "BASELINES", "CurvePoint", "DecisionTree", "EvalProtocol", "EvalTask", "MetricReport", "MetricRow",
    "RandomForest", "TaskError", "UndefinedMetricError", "accuracy", "curve_to_csv", "evaluate_model",
    "forest_predict", "knn_predict", "learning_curve", "load_csv_task", "load_model", "roc_auc",
    "stratified_kfold", "stratified_subsample", "synthetic_tasks", "tree_predict",
]
