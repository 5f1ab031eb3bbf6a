"""Keypoint networks trained and pruned by neuron-stability statistics,
with Lipschitz and probabilistic robustness certification of semantic
perturbations (brightness/contrast)."""

from .errors import ConfigurationError, ContractError, NumericError, UsnpruneError
from .network import (ConvOperator, DenseOperator, ForwardTrace, LayerSpec, Network,
                      backward, cnn_small, compact, forward, head_lipschitz_constant,
                      layer_spectral_norms, lipschitz_to_output, load_network,
                      operator_for, prune_channels, save_network, soft_argmax,
                      spectral_norm)
from .perturbation import GridCell, PerturbationSpec, apply, grid, sample, sample_params
from .usn import (UsnStats, accumulate, channel_importance, collect_stats, importance,
                  layer_metrics, neuron_contributions, write_stats_csv)
from .wasserstein import (DiscreteDistribution, TargetDistribution, WassersteinLossResult,
                          target_distribution, w2_discrete, wasserstein_loss)
from .certify import (CampaignReport, CertificateResult, KeypointCriterion, campaign,
                      certify_grid, certify_probabilistic, falsify, usn_necessary_bounds,
                      write_campaign_csv, write_campaign_summary)
from .pruning import (LayerUsnTerms, LossWeights, PruningSchedule, TrainConfig, TrainResult,
                      batch_terms, is_prune_epoch, prune_step, random_prune_baseline, rho_at,
                      scale_keypoints_to_output, select_keep, total_loss, train,
                      transport_loss, usn_layer_terms, write_training_log)
from .data import (KeypointDataset, SceneParams, generate_dataset, load_dataset,
                   render_scene, save_dataset)
from .estimator import UsnPruningRegressor

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
