"""
What stay lengths look like per user
====================================

After fitting, label each period with its most probable segment and count the
stays of each length. Each user's histogram falls into one of six shapes.
The occupancy posteriors also tell us how many states each user visits.
"""

import numpy as np

from hsmmrec import EmOptions, PriorSpec, em_fit, sample_dataset
from hsmmrec.estimation import batch_posteriors
from hsmmrec.evaluation import duration_histograms, shape_counts, state_timeline, states_per_user
from hsmmrec.synthetic import drifting_interest_params

params = drifting_interest_params(K=4, M=4, n_items=40)
ds, _ = sample_dataset(params, 200, 24, seed=3)
fit, _ = em_fit(ds, 4, 4, PriorSpec(100.0), EmOptions(max_iterations=150, rel_tol=1e-6))

###############################################################################
# Hard-decoded stay histograms, one row per user.

hists = duration_histograms(ds, fit)
print("first five users:\n", hists[:5].astype(int))
for shape, users in shape_counts(hists).items():
    print(f"{shape:>22}: {users}")

###############################################################################
# Distinct states per user, and how many users sit in each state over time.

occ = batch_posteriors(ds, fit).occupancy
_, visited = states_per_user(occ)
print("users by number of states visited:", dict(enumerate(visited.tolist())))
tl = state_timeline(occ, top_j=4)
for k, row in zip(tl.states, tl.counts):
    print(f"state {k}:", " ".join(f"{c:3d}" for c in row))
print("column sums equal the user count:", np.all(tl.counts.sum(axis=0) == ds.n_users))
