"""
Local surrogate explanations
============================

LIME switches features between their value and a baseline, weights each
perturbed point by its distance to the input, and fits a weighted ridge
regression on the on/off pattern. For a linear model the fit is exact,
which makes a convenient sanity check.
"""

import numpy as np

from xairefine import lime, nn

rng = np.random.default_rng(0)
W = rng.normal(size=(2, 6))
model = nn.ModelState([W], [np.zeros(2)])
x = rng.normal(size=6)
mu = np.zeros(6)

cfg = lime.LimeConfig(baseline_value=mu, ridge=0.0, seed=1)
att = lime.explain(model, x, cfg)
k = int(np.argmax(nn.forward(model, x)))
print("surrogate beta :", np.round(att.beta, 6))
print("W_k * (x - mu) :", np.round(W[k] * (x - mu), 6))
print("r2:", att.r2)

# a wider kernel gives distant points more weight
z = x + 1.0
for sigma in (0.5, 2.0, 10.0):
    print(f"kernel weight at width {sigma}: {lime.kernel_weight(x, z, sigma):.4f}")

# group masking: features 0-2 and 3-5 switch together
grouped = lime.explain(model, x, lime.LimeConfig(group_size=3, ridge=0.0, seed=1))
print("group coefficients:", grouped.group_beta)

# a nonlinear net: attributions vary with the sampling seed and with input jitter
net = nn.init_model(6, [16], 2, seed=4)
print("variance across 5 re-runs:",
      np.round(lime.attribution_variance(net, x, 5, lime.LimeConfig(seed=0)), 6))
print("... with input jitter 0.5: ",
      np.round(lime.attribution_variance(net, x, 5, lime.LimeConfig(seed=0), 0.5), 4))
