"""Toy-scale camera-based semantic scene completion with vision-language guidance.

Submodules: ``tensor`` (autodiff), ``sparse`` (sparse voxel convolutions),
``vlgd`` (teacher distillation), ``view`` (lift-splat), ``gssa`` (volume
refinement), ``losses`` (objectives and metrics), ``scene`` (synthetic data),
``config``, ``model``, ``train``, ``gradcheck`` and ``cli``.
"""

__version__ = "0.1.0"
