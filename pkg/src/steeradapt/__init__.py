"""Adversarial domain adaptation for steering-angle regression.

Three training phases share one set of building blocks:

* :mod:`steeradapt.nn_core` - the regressor, generator and discriminator stacks
* :mod:`steeradapt.losses` - regression, adversarial and cycle objectives
* :mod:`steeradapt.data` - manifests, normalization, batching, synthetic scenes
* :mod:`steeradapt.training` - the three phases plus checkpointing
* :mod:`steeradapt.evaluation` - MSE / AARE and baseline comparison
* :mod:`steeradapt.cli` - the ``steeradapt`` command
"""

__version__ = "0.1.0"

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)
# discriminator logit columns
DOMAIN_CLASS = {SOURCE: 0, TARGET: 1}
