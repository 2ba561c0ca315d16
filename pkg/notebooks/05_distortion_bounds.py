"""
First-order distortion bounds and how far to trust them
=======================================================

``delta_min`` divides the logit margin by the dual norm of the gradient of
the logit difference. For a linear classifier this is the exact minimal
l_inf distortion. For a ReLU network it is only a first-order estimate, and
an attack search shows where it overshoots.
"""

import numpy as np

from xairefine import attacks, certifier, datagen, nn, refinement

spec = datagen.PlantedSpec()
train, test, _ = datagen.make_planted(spec, 2000, 200, seed=0)

linear = refinement.train_standard(nn.init_model(spec.d, [], 2, seed=1), train, 10, seed=2)
x, y = test.inputs[0], test.labels[0]
b = certifier.distortion_lower_bound(linear, x)
print("linear model: delta_min", round(b.delta_min, 4),
      "search", attacks.min_perturbation_search(linear, x, int(nn.predict(linear, x))))

mlp = refinement.train_standard(nn.init_model(spec.d, [32], 2, seed=1), train, 20, seed=2)
rep = certifier.certify_split(mlp, test.inputs[:20], test.labels[:20], with_empirical=True,
                              resolution=1e-2)
print("mlp summary:", rep.summary())
for r in rep.records[:5]:
    print(f"  point {r.index}: delta_min {r.delta_min:.3f}  empirical {r.delta_emp}")

# masking a feature removes it from the Lipschitz estimate and can only raise the bound
masked = certifier.distortion_lower_bound(mlp, x, np.r_[np.zeros(8), np.ones(5), np.zeros(51)])
print("unmasked", round(certifier.distortion_lower_bound(mlp, x).delta_min, 4),
      "masked", round(masked.delta_min, 4), "max masked grad", round(masked.max_masked_grad, 4))
