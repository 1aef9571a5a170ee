"""Graph-based attention over medical ontologies for EHR sequence prediction."""

from .ontology import OntologyDag, OntologyError, ancestor_map, ancestors, parse_ontology, promote_observed_ancestors
from .ehr import DatasetSplit, GroupMap, PatientRecord, build_labels, load_records, multi_hot, split_dataset
from .embedding import GloVe, SparseCooccurrence, augment_visit, build_cooccurrence, glove_fit, glove_weight
from .model import ModelState
from .training import TrainConfig, TrainReport, make_random_dag, rollup_rare, rollup_simple, train
from .evaluation import EvalReport, accuracy_at_k, auc, percentile_bins
from .estimator import GRAMClassifier

__version__ = "0.1.0"
