"""Small-area disease mapping with Berkson population-at-risk uncertainty."""

from .graph import (AreaGraph, bym2_scaling_factor, center_by_component,
                    connected_components, from_edge_list,
                    icar_log_density_unnormalized)
from .mcmc import (ChainSet, SamplerSettings, SummaryTable, desk_profile,
                   effective_sample_size, paper_profile, run_chains,
                   split_rhat, summarize)
from .model import (ModelConfig, OffsetModel, ParameterState, Source,
                    StratifiedDataset, linear_predictor, log_likelihood,
                    log_posterior, log_prior, relative_risk)
from .offsets import (acs_log_scale_sd, acs_moe_to_sd, berkson_attenuation,
                      offset_log_density)
from .simulate import (ScoreReport, SimulationSpec, generate_dataset,
                       run_study, score_fixed_effects, score_relative_risks)

__version__ = "0.1.0"
