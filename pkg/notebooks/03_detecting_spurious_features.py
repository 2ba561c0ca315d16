"""
Finding the shortcut features
=============================

The planted dataset has 8 core features that carry the label everywhere and
5 shortcut features that agree with the label 95% of the time in training
but only at chance on the test split. A standard model leans on the
shortcuts. The detector compares its LIME attributions, input gradients and
attribution stability against a reference that knows the core set.
"""

import numpy as np

from xairefine import attacks, datagen, lime, nn, refinement, spurious

spec = datagen.PlantedSpec()
train, test, _ = datagen.make_planted(spec, 4000, 2000, seed=0)
model = refinement.train_standard(nn.init_model(spec.d, [32], 2, seed=1), train, 20, seed=2)
print("clean test accuracy:", attacks.evaluate(model, test).accuracy)

cal = train.inputs[refinement.calibration_indices(train.n, 64, seed=0)]
stats = spurious.collect_stats(model, datagen.relevance_indicator(spec), cal,
                               lime.LimeConfig.for_data(train.inputs), M=5, input_noise=0.5)
print("mean |beta| (first 16 features):", np.round(stats.mean_abs_attr[:16], 3))

found = spurious.identify_spurious(stats, spurious.Thresholds())
print("irrelevant:", found.irrelevant)
print("sensitive :", found.sensitive)
print("unstable  :", found.unstable)
print("scores:", spurious.detection_scores(found.indices, spec.spurious_indices))
