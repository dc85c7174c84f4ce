"""Training-free position-bias calibration for multi-candidate inference."""

from .traces import (
    EOS_TOKEN,
    CandidateTokenization,
    InferenceTrace,
    LabelScheme,
    ShiftSpec,
    StepLogits,
    TraceError,
    cyclic_shift,
    load_traces,
    read_traces,
    save_traces,
    scheme_labels,
    tokenize_label,
    write_trace,
)
from .scoring import CandidateProbabilities, ScoringError, score_candidates
from .calibration import (
    AttentionPrior,
    CalibrationError,
    CalibrationProfile,
    ConditionalBiasMatrix,
    ObsMatrix,
    build_profile,
    estimate_attention_prior,
    estimate_gamma,
    estimate_obs_matrix,
    load_profile,
    recover_bias,
    save_profile,
)
from .debias import (
    DebiasConfig,
    DebiasResult,
    VisualPosterior,
    debias_scores,
    expected_prior,
    layer_strength,
    predict,
    select_layers,
    visual_posterior,
)
from .baselines import (
    GlobalPrior,
    OrbitError,
    attention_readout_predict,
    estimate_global_prior,
    permutation_average_predict,
    pride_predict,
    purified_attention_predict,
    vanilla_predict,
)
from .evaluation import (
    DivergenceReport,
    Episode,
    EvalError,
    EvalReport,
    assemble_episodes,
    consistency,
    divergence_report,
    evaluate,
    logit_profile_report,
    recall_std,
)
from .synthetic import (
    BiasSpec,
    EpisodeSpec,
    GeneratorConfig,
    GeneratorError,
    PresentationSpec,
    SinkSpec,
    generate_calibration_set,
    generate_eval_episodes,
    generate_homogenized_pair,
    generate_trace,
    load_preset,
    preset_names,
)
from .benchgen import (
    EmbeddingRecord,
    MiningError,
    MiningParams,
    build_benchmark,
    mine,
    read_embeddings,
)
from .util import LadcalibError

__version__ = "0.1.0"
