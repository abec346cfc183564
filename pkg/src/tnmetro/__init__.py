"""tnmetro: tensor-network optimization of quantum-metrology protocols.

Finds optimal probe states and measurements (maximal quantum Fisher
information) for many-body systems under locally correlated dephasing, for
finite chains via MPO sweeps and for the thermodynamic limit via
translation-invariant infinite MPOs, all validated against an exact
small-system oracle.
"""

__version__ = "0.1.0"
