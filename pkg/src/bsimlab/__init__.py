"""Mixed-instance ("spurious positive") contrastive learning on a numpy autodiff core.

Modules:

* :mod:`bsimlab.ndgrad` - reverse-mode autodiff and gradient checking
* :mod:`bsimlab.augment` - view augmentation, Beta sampling, CutMix / Mixup
* :mod:`bsimlab.models` - encoder, heads, EMA target and key queue
* :mod:`bsimlab.losses` - SimCLR / MoCo / BYOL losses and their mixed variants
* :mod:`bsimlab.equilibrium` - sphere-constrained minimizers of the BYOL objectives
* :mod:`bsimlab.trainkit` - deterministic training loops and checkpoints
* :mod:`bsimlab.evalkit` - linear probe, kNN, PCA, embedding export
* :mod:`bsimlab.datagen` - synthetic shapes and the CIFAR binary format
* :mod:`bsimlab.cli` - command-line entry point
"""

__version__ = "0.1.0"
