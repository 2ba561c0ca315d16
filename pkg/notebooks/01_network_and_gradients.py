"""
A small ReLU network and its exact gradients
============================================

The networks here are plain affine + ReLU stacks in float64 with hand-written
reverse mode. This script builds one, checks a gradient against central
differences, and saves and reloads it.
"""

import numpy as np

from xairefine import nn

model = nn.init_model(input_dim=4, hidden=[6], num_classes=3, seed=0)
x = np.array([0.5, -1.0, 0.25, 2.0])
print("logits:", nn.forward(model, x))
print("loss at label 2:", nn.cross_entropy(nn.forward(model, x), 2))

# reverse mode vs central differences on the input
g = nn.backward(model, x, 2).input_grad
h = 1e-4
fd = np.array([(nn.cross_entropy(nn.forward(model, x + h * e), 2)
                - nn.cross_entropy(nn.forward(model, x - h * e), 2)) / (2 * h)
               for e in np.eye(4)])
print("input gradient      :", g)
print("finite differences  :", fd)

# per-class logit gradients, all at once
print("jacobian shape:", nn.logit_jacobian(model, x).shape)

# a few SGD steps on one example
for step in range(5):
    grads = nn.backward(model, x, 2)
    model = nn.sgd_step(model, grads, lr=0.1)
    print(f"step {step}: loss {grads.loss:.4f}")

nn.save_model(model, "/tmp/tiny_model.json")
print("reload is exact:", nn.load_model("/tmp/tiny_model.json").equals(model))
