"""Expert-selection aware compression workbench for a toy mixture-of-experts decoder."""

__version__ = "0.1.0"

from .analysis import (  # noqa: E402
    ChangeRates,
    FrequencyProfile,
    change_rates,
    expert_shift_grid,
    frequency_profile,
    profile_similarity,
    similarity_matrix,
)
from .calibration import CalibConfig, QESCQuantizer, TopKMSERegressor, calibrate_router, run_qesc_pipeline  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .config import RunConfig  # noqa: E402
from .corpus import family_sequences, gen_corpus, load_corpus, mixture_sequences  # noqa: E402
from .model import (  # noqa: E402
    ModelConfig,
    MoEModel,
    RoutingTrace,
    forward,
    forward_with_forced_routing,
    init_planted,
    perplexity,
)
from .pruning import ExpertPruner, PruneConfig, compute_prune_mask, forward_pruned  # noqa: E402
from .quant import (  # noqa: E402
    BitSchedule,
    QuantConfig,
    QuantizedMatrix,
    WeightQuantizer,
    gptq_quantize,
    pack_codes,
    rtn_quantize,
    unpack_codes,
)
