"""Robust group-reweighted training and its evaluation harness on synthetic
group-structured classification data."""

from .core import (
    Dataset,
    GroupLayout,
    LabeledExample,
    SimplexVector,
    normalize_simplex,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from .datagen import (
    Blobs2DSpec,
    SeqTaskSpec,
    Table1Spec,
    gen_blobs2d,
    gen_seq_task,
    gen_table1,
    seq_label_oracle,
)
from .dro import (
    EmaTracker,
    RobustState,
    eg_group_weights,
    example_weight,
    gc_conditional_weights,
    gc_cutoff,
    gc_cutoff_fraction,
    greedy_group_weights,
)
from .eval import (
    GroupMetrics,
    Heatmap,
    group_accuracies,
    robust_accuracy_merged,
    weight_heatmap,
)
from .partition import (
    PartitionSpec,
    apply_partition,
    clean_partition,
    kmeans_partition,
    merged_partition,
)
from .trainer import (
    RunRecord,
    TrainConfig,
    inner_update_check,
    load_run,
    save_run,
    select_model,
    train,
)

__version__ = "0.1.0"
