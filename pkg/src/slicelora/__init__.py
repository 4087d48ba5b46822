"""Conflict-aware low-rank adapter initialization with a desk-scale continual-learning harness."""
from .adapters import (AdapterPair, InitConfig, RescaleReport, absorb, absorb_model, dst2_basis, factorize,
                       initialize, load_adapters, lora_ga_init, loram_init, magnitude_rescale,
                       rescale_coefficient, save_adapters, scaling_factor, slice_init, vanilla_init)
from .config import RunConfig, build_experiment, dump_config, load_config, parse_config
from .estimators import ConflictMiner, LowRankInitializer
from .exceptions import (BudgetExceeded, ConfigError, DegenerateInputError, DivergenceError, NoPreviousTasks,
                         NonFiniteError, SamplerExhausted, ShapeError, SliceError)
from .harness import (MetricsSummary, ResultsMatrix, SequenceConfig, compute_metrics, evaluate, run_sequence,
                      train_task)
from .linalg import SvdConfig, SvdResult, entrywise_variance, frobenius_inner, matmul, svd
from .miner import (PairScoreCache, SequenceCandidate, TaskGradientSketch, build_pair_cache, mine,
                    sketch_task_gradient)
from .model import (GradientSet, LayerWeights, SyntheticTask, ToyModel, accumulate_gradients,
                    build_prev_sampler, forward, layer_gradients, loss)
from .surgery import SurgeryConfig, pcgrad_project
from .synthetic import angle_pool, held_out_tasks, subspace_pool

__version__ = "0.1.0"
