"""Multi-scale adaptive-switch random forests for leg detection in 2D laser scans.

The pipeline: segment a scan into point clusters by jump distance, describe
each cluster with 17 geometric features, and classify clusters with a
multi-scale ensemble of adaptive-switch decision trees fused across depth
scales. Baseline hard-split (SRF) and all-soft (PRF) trees, a synthetic scene
generator, and an evaluation/benchmark harness are included.
"""

__version__ = "0.1.0"

from .scan import (
    DEFAULT_JUMP_THRESHOLD,
    CircleObstacle,
    LaserScan,
    PersonAnnotation,
    PersonConfig,
    Point2D,
    PointCluster,
    SceneConfig,
    SegmentObstacle,
    cluster_scan,
    generate_scene,
    inject_gaussian_noise,
    label_clusters,
    read_scan_dataset,
    write_scan_dataset,
)
from .features import (
    FEATURE_NAMES,
    N_FEATURES,
    ConfidenceReport,
    FeatureId,
    FeatureStats,
    FeatureTable,
    FeatureVector,
    conflict_check,
    extract_features,
    feature_confidence,
    feature_stats,
    read_feature_csv,
    table_confidence,
    write_feature_csv,
)
from .tree import (
    Dichotomous,
    Leaf,
    NoValidSplitError,
    Regular,
    TrainParams,
    Tree,
    TreeStats,
    dichotomous_weights,
    find_best_dichotomous_threshold,
    find_best_split,
    gini,
    predict_tree,
    train_prf_tree,
    train_srf_tree,
    train_tree,
    tree_stats,
)
from .forest import (
    Arf,
    MarfModel,
    ModelFormatError,
    NonterminatingSamplingError,
    ScalePartition,
    VersionMismatchError,
    biased_sample,
    load_model,
    make_partition,
    predict_marf,
    predict_marf_batch,
    save_model,
    scale_of,
    train_marf,
)
from .evaluation import (
    BenchReport,
    ConfusionCounts,
    NoiseStudyReport,
    PrCurve,
    benchmark,
    confusion_and_rates,
    noise_study,
    pr_curve,
    pr_curve_from_scores,
)
from .pipeline import classify_scan, extract_dataset
