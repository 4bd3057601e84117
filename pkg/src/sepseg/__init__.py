"""Separable-convolution segmentation of anisotropic CT volumes.

Modules: ``volgrid`` (volumes, file formats, phantoms), ``xform`` (HU
transforms), ``tensor`` (numpy autodiff kernels), ``sepnet`` (networks and
checkpoints), ``loss``, ``trainer``, ``infer`` (prediction, ensembling,
uncertainty), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
