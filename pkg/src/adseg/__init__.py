"""User segmentation from installed-app profiles and ad-interaction analytics."""

from .clustering import ClusterModel, LloydKMeans, ValidationReport, assign, kmeans_fit, validate
from .errors import AdsegError, DataError
from .features import (AppCatalog, AppCategoryMapper, CategoryProfile, ZScoreStandardizer,
                       category_percentages, fit_standardizer, load_catalog, standardize)
from .ingest import (AdGenre, FirstOccurrenceStore, InteractionRecord, InteractionStage,
                     dedup_first, parse_record)
from .metrics import IndexTable, InteractionMatrix, build_matrix, index_table, index_value
from .mining import (AssociationRuleMiner, Basket, Rule, app_count_class, build_baskets,
                     mine_rules, select_rule_set, time_of_day_class)
from .synth import SynthSpec, expected_index, generate

__version__ = "0.1.0"

__all__ = [
    "AdGenre", "AdsegError", "AppCatalog", "AppCategoryMapper", "AssociationRuleMiner", "Basket",
    "CategoryProfile", "ClusterModel", "DataError", "FirstOccurrenceStore", "IndexTable",
    "InteractionMatrix", "InteractionRecord", "InteractionStage", "LloydKMeans", "Rule",
    "SynthSpec", "ValidationReport", "ZScoreStandardizer", "app_count_class", "assign",
    "build_baskets", "build_matrix", "category_percentages", "dedup_first", "expected_index",
    "fit_standardizer", "generate", "index_table", "index_value", "kmeans_fit", "load_catalog",
    "mine_rules", "parse_record", "select_rule_set", "standardize", "time_of_day_class", "validate",
]
