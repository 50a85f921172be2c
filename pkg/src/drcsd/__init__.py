"""Denoised graph collaborative filtering with order-decoupled signals."""

from .data import (BprTriple, InteractionSet, SplitDataset, inject_noise,
                   load_interactions, read_split, sample_negatives, split,
                   write_split)
from .decouple import (DecoupledStack, DecouplingReport, decouple,
                       load_or_decouple, verify_decoupling)
from .errors import (CapacityError, DrcsdError, NumericError, ParseError,
                     SamplingError, ValidationError)
from .eval import EvalReport, evaluate, metrics_at_k, rank_topk
from .graph import (InteractionGraph, SparseMatrix, bfs_distances,
                    build_bipartite, spmatmul, spmv_dense,
                    symmetric_normalize)
from .model import (Checkpoint, EdgeMask, EmbeddingTable, ForwardState,
                    denoise_adjacency, edge_similarity, forward, gumbel_mask,
                    hidden_state, init_embeddings, load_checkpoint,
                    save_checkpoint, score)
from .train import (AdamState, GradientBundle, TrainConfig, adam_step,
                    batch_loss, bpr_loss, fit, gradient, l2_reg, ld_loss)

__version__ = "0.1.0"
