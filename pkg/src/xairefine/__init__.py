"""Attribution-guided adversarial refinement on small feedforward classifiers."""

__version__ = "0.1.0"
