"""Geodesic-guided contrastive training and game-theoretic interaction
alignment on synthetic moment/query embeddings, with exact oracles for
every numeric component."""

__version__ = "0.1.0"

from .errors import DataError, DivergenceError
from .game import (
    AlignmentGame,
    AxiomReport,
    Game,
    InteractionMatrix,
    check_axioms,
    coalition_weight,
    exhaustive_pair_interaction,
    interaction_matrix,
    psi_game_score,
    sampled_pair_interaction,
    semantic_interaction_sampled,
    shapley_interaction_exact,
    shapley_value_exact,
    table_game,
)
from .geodesic import (
    DEFAULT_G_CAP,
    GeodesicTable,
    MomentGraph,
    all_pairs_oracle,
    build_knn_graph,
    dijkstra,
    geodesics_from_targets,
)
from .losses import (
    Batch,
    GclConfig,
    LossBundle,
    LossPart,
    build_alignment_games,
    geodesic_contrastive_loss,
    geodesic_weighting,
    grounding_loss,
    prepare_step_context,
    select_semantic_positives,
    ssi_loss,
    total_loss,
    vanilla_contrastive_loss,
)
from .numcore import (
    EmbeddingMatrix,
    RngStream,
    cosine_similarity,
    finite_diff_gradient,
    l2_normalize_rows,
    max_rel_error,
    row_softmax,
)
from .synthdata import SynthConfig, SynthDataset, generate, load, save
from .trainer import (
    Encoder,
    MetricsReport,
    TrainConfig,
    alignment_metric,
    evaluate,
    load_encoder,
    recall_at_n,
    save_encoder,
    train,
    uniformity_metric,
)
