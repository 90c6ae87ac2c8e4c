"""Calibrated adversarial stain augmentation for H&E-like images.

Modules:

* ``stain_core``: Beer-Lambert optical density, Macenko decomposition, reconstruction.
* ``calibration``: per-image stain deviations and DKW-corrected budgets.
* ``perturbation``: feasible stain perturbations, projections, rendering.
* ``adversary``: PGD over stain perturbations with exact gradients.
* ``toy_model``: small hand-written MLP classifier.
* ``trainer``: CASA, ERM and random-augmentation training, group evaluation.
* ``synth_data``: seeded synthetic multi-center patch datasets.
* ``cli``: the ``casa`` command.
"""

__version__ = "0.1.0"
