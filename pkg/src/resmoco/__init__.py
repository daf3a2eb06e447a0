"""Momentum contrastive self-supervised learning with a same-view
teacher/student gap loss, on a small numpy autodiff engine."""

__version__ = "0.1.0"
