"""ctrscope: a from-scratch CTR network with introspection tooling.

The package trains a sparse-embedding feedforward click model on synthetic
drifting click logs and inspects it with neuron statistics, linear probes,
gradient saliency and t-SNE projections.
"""

from .data import (
    Dataset,
    FeatureSchema,
    GeneratorConfig,
    GroupSpec,
    Instance,
    build_ground_truth,
    default_schema,
    read_dataset,
    sample_day,
    write_dataset,
)
from .errors import (
    CompatibilityError,
    CtrScopeError,
    DataParseError,
    NumericError,
    SchemaError,
    ShapeError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .experiment import ExperimentConfig, ReportConfig, run_ablation, run_training
from .introspection import avg_abs_correlation, capture, dead_fraction, neuron_stats
from .metrics import auc, logloss, score_histogram
from .net import (
    ModelConfig,
    Parameters,
    backward,
    forward,
    init_params,
    load_checkpoint,
    predict,
    predict_gradient_h0,
    save_checkpoint,
)
from .probes import ProbeConfig, eval_probes, train_probe, train_probes
from .saliency import SaliencyReport, group_saliency
from .train import AdagradState, MetricTimeline, TrainConfig, adagrad_step, train
from .tsne import TsneConfig, sample_for_projection, tsne

__version__ = "0.1.0"
