"""Hybrid analytical/ML ripple estimation for Cockcroft-Walton multipliers.

Modules:

* :mod:`cwripple.theory`   classical closed-form ripple formulas
* :mod:`cwripple.circuit`  backward-Euler transient simulator of the cascade
* :mod:`cwripple.features` ripple metrics and waveform statistics
* :mod:`cwripple.dataset`  parameter sweep, CSV schema, feature matrices, splits
* :mod:`cwripple.forest`   random forest regressor (CART, bagging, CV grid search)
* :mod:`cwripple.hybrid`   residual correction, metrics and regime reports
* :mod:`cwripple.cli`      the ``cwripple`` command
"""

__version__ = "0.1.0"
