"""Region-text pretraining, distillation, structural filter trimming and
ground-plane free-space geometry on a small numpy autodiff engine."""

__version__ = "0.1.0"
