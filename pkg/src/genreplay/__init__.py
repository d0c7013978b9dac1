"""Class-incremental learning with generator-diversified exemplar replay.

The library trains a classifier over a stream of disjoint-class tasks while
fighting catastrophic forgetting three ways: a budgeted herding-selected
exemplar memory, per-class feature generators that remix exemplar content
with statistics from unlabeled images, and cosine feature distillation
against the previous backbone.  Everything runs on a small self-contained
reverse-mode autodiff engine over numpy buffers.
"""

from .datastream import (SyntheticSpec, TaskStream, UnlabeledPool,
                         ingest_image_folder, make_synthetic_stream, split_protocol)
from .errors import (CheckpointFormatError, ConfigError, ContractError,
                     DegenerateInputError, ProtocolOrderError, ShapeError)
from .losses import (GeneratorLossWeights, GramMatrix, TaskLossWeights,
                     cycle_loss, distillation_loss, generator_objective,
                     gram_matrix, semantic_loss, style_loss, task_objective)
from .memory import ExemplarMemory, add_task_exemplars, herding_select
from .nets import (FeatureGenerator, GeneratorBank, GrowableClassifier,
                   SplitBackbone)
from .tensor import (SGD, Parameter, Tensor, backward, conv2d,
                     cosine_similarity, global_avg_pool, linear, no_grad,
                     relu, softmax_cross_entropy)
from .trainer import (IncrementalTrainer, ModelSpec, RunMetrics, TrainConfig,
                      evaluate, mixup_images, replay_generate, run_incremental)

__version__ = "0.1.0"
