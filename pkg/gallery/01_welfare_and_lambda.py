"""A first look: value functions, the stationary law and lambda.

Run from the repository root:

    python gallery/01_welfare_and_lambda.py
"""
import numpy as np

import ddc_welfare as dw

# The ordered 20-state design used throughout the coverage study. States sit
# on a grid in [-1, 1]; the chain mostly diffuses locally and sometimes jumps.
model = dw.reference_model()
print("states, actions, beta:", model.n_states, model.n_actions, model.beta)

# solve_truth runs the emax fixed point and collects the population objects
truth = dw.solve_truth(model)
print("V at the first five states:", np.round(truth.V[:5], 4))
print("CCP of action 1 at the grid ends:", np.round(truth.ccp[[0, -1], 1], 4))

# The same V comes out of the linear system (I - beta P_p) V = U~(p) once the
# CCPs are known. This is the map the estimator uses with estimated CCPs.
V_ccp = dw.solve_value_ccp(truth.ccp, model.kernel, model.utility, model.beta).V
print("max |V_emax - V_ccp|:", np.abs(V_ccp - truth.V).max())

# The target: theta0 = E_pi[w(x) V(x)]. With w == 1 it is average welfare.
w1 = dw.build_constant_weight(model.n_states)
print("theta0 (w == 1):", dw.true_theta(truth, w1))

# lambda is the discounted backward resolvent of w. For w == 1 it is flat.
print("lambda for w == 1:", np.round(truth.lam(w1)[:3], 12), "... 1/(1-beta) =",
      1 / (1 - model.beta))

# A counterfactual weight moves every state one step up the grid. lambda now
# varies with x because it averages w over where the chain came from.
shift = np.minimum(np.arange(model.n_states) + 1, model.n_states - 1)
w_cf = dw.build_counterfactual_weight(shift, truth.stationary)
lam = truth.lam(w_cf)
print("counterfactual theta0:", dw.true_theta(truth, w_cf))
print("lambda range:", lam.min().round(3), "to", lam.max().round(3))
