# %% [markdown]
# # Pricing long-term care cover, with and without the sensitive attribute
#
# The lump-sum premium for $1 a year while disabled is the discounted sum of
# occupancy probabilities of the Disabled state, obtained by chaining
# one-year transition matrices exp(Q(x)).
#
# Three prices per policy:
# * best estimate: rates fitted with the sensitive attribute
# * blind: attribute left out of the fit
# * fairness-adjusted: best-estimate rates averaged over the portfolio's
#   group mix, so the rate no longer depends on the group

# %%
from fairmsm import lump_sum_ltci, multi_year_probs, quote_batch
from fairmsm.core import ltci_product
from fairmsm.fairness import DiscriminationFreeModel, demographic_parity_gap, ot_preprocess, policy_level_distribution
from fairmsm.glm import fit_rate_model
from fairmsm.pipeline import build_exposure, rows_to_frame
from fairmsm.synthetic import default_scenario, generate_population, generate_study

scenario = default_scenario(n=20_000, seed=0)
spec = scenario.transition_spec
pop = generate_population(scenario)
trajs = generate_study(scenario, pop)
frame = rows_to_frame(build_exposure(trajs, spec, pop))

best = fit_rate_model(frame, spec, ["z1", "z2"], ["smoker"], uses_sensitive=True)
blind = fit_rate_model(frame, spec, ["z1", "z2"], ["smoker"])
adjusted = DiscriminationFreeModel(best, policy_level_distribution(pop))

# %% [markdown]
# State probabilities 20 years after issue at 65 for an average non-smoker in group B:

# %%
z = {"z1": 0.0, "z2": 0.0, "smoker": "no"}
P = multi_year_probs(best, z, 65, 85, "B")
print(P.P[0].round(4), "(Healthy, Disabled, Dead)")
print("lump sum:", round(lump_sum_ltci(best, z, 65, "B"), 4))

# %% [markdown]
# ## Parity at a common issue age
#
# Everyone is priced as if issued at 65 so that only covariates and group drive
# the differences.

# %%
models = {"best_estimate": best, "blind": blind, "fairness_adjusted": adjusted}
quotes = quote_batch(pop, models, ltci_product(), issue_age=65)
for mode in models:
    rep = demographic_parity_gap([q for q in quotes if q.mode == mode], 65)
    means = ", ".join(f"{g} {v:.3f}" for g, v in rep.means.items())
    print(f"{mode:18s} gap {rep.gap:.4f}  max KS {rep.max_ks:.3f}  ({means})")

# %% [markdown]
# Blinding removes the direct effect but not the proxy; averaging over the
# group mix removes a little more. Neither touches the proxy itself.
#
# ## Pre-processing: transport the proxy
#
# Map each group's `z1` onto the pooled distribution by rank, refit blind.

# %%
moved = ot_preprocess(pop, ["z1"])
frame_ot = rows_to_frame(build_exposure(trajs, spec, moved), ["z1", "z2", "smoker"])
blind_ot = fit_rate_model(frame_ot, spec, ["z1", "z2"], ["smoker"])
for name, model, pols in (("blind", blind, pop), ("blind after transport", blind_ot, moved)):
    rep = demographic_parity_gap(quote_batch(pols, {"blind": model}, ltci_product(), issue_age=65), 65)
    print(f"{name:22s} gap {rep.gap:.4f}  max KS {rep.max_ks:.3f}")
