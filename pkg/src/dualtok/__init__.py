"""Two-stage cross-modal retrieval: dual transformer encoders trained
with a consistency-regularized triplet objective, queried by a fast
global pass plus token-level re-ranking."""

from .encoder import (DualEncoder, EncoderConfig, build_image_tokens, encode_image,
                      encode_samples, encode_text, init_params, load_checkpoint,
                      save_checkpoint)
from .engine import (InferenceConfig, RankedEntry, RankedList, exhaustive_search,
                     global_topk, rerank_mixed, two_stage_search)
from .errors import (DataError, DomainError, DualtokError, FormatError, NumericError,
                     TruncationError)
from .evaluation import (BenchmarkReport, DirectionMetrics, GroundTruth, MetricsReport,
                         ModeTiming, benchmark, evaluate_retrieval, queries_from_index,
                         query_from_index, recall_at_k, sweep, sweep_table_lines)
from .features import (Modality, RawImageInput, SampleFeatures, read_feature_file,
                       read_jsonl, validate_sample, write_feature_file)
from .index import GalleryIndex, build_index, load_index, save_index
from .losses import (GradientCheckReport, LossConfig, batch_task_loss,
                     combined_pair_loss, consistency_loss, gradient_check,
                     mine_hard_negatives, torch_value_and_grad, triplet_ranking_loss)
from .similarity import (SimilarityMode, global_similarity, local_similarity,
                         mixed_similarity, token_similarity_matrix)
from .synthetic import (SyntheticDataConfig, generate_synthetic_dataset, read_pairs,
                        write_pairs, write_synthetic_dataset)
from .training import (EpochStats, TrainConfig, TrainResult, evaluate_batch_loss,
                       history_lines, make_optimizer, train, train_step)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
