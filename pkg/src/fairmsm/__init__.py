"""Multi-state health models with fairness-aware premium pricing.

Modules
-------
core        transition structure, trajectories, policies, products
pipeline    trajectories -> age-split exposure rows, CSV I/O
glm         Poisson regression for transition intensities
multistate  generators, transition probabilities, simulation
pricing     expected-present-value premiums
fairness    discrimination-free rates, quantile transport, parity metrics
adversarial adversarially debiased intensity networks (needs torch)
synthetic   synthetic populations and studies
"""
from .core import (
    CENSORED, Policy, ProductSpec, RateModel, Sojourn, Trajectory, TransitionSpec,
    ltci_product, three_state_spec, two_state_spec,
)
from .errors import FairMSMError, NumericalError, ValidationError
from .glm import GLMRateModel, fit_poisson, fit_rate_model
from .multistate import multi_year_probs, occupancy, simulate_cohort
from .pipeline import build_exposure, expand_exposure, rows_to_frame, split_by_age
from .pricing import lump_sum_ltci, quote_batch

__version__ = "0.1.0"
