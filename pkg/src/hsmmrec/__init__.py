"""Duration-aware recommendation with a hidden semi-Markov model.

Users move between latent interest states; each stay has an explicit,
non-parametric duration law, and every period of a stay emits a
negative-binomial number of consumptions spread over items by a
multinomial.
"""

from .dataset import (FilterCriteria, PeriodGrid, PeriodizedDataset, RawEvent, filter_activity, from_dense,
                      load_dataset, parse_events, periodize, save_dataset)
from .estimation import EmOptions, PriorSpec, e_step, em_fit, fit_best, fit_nbd, log_likelihood
from .model import HsmmParams, load_model, sample_dataset, save_model
from .prediction import predict, top_n

__version__ = "0.1.0"

__all__ = [
    "EmOptions", "FilterCriteria", "HsmmParams", "PeriodGrid", "PeriodizedDataset", "PriorSpec", "RawEvent",
    "e_step", "em_fit", "filter_activity", "fit_best", "fit_nbd", "from_dense", "load_dataset", "load_model",
    "log_likelihood", "parse_events", "periodize", "predict", "sample_dataset", "save_dataset", "save_model",
    "top_n",
]
