"""Neural Koopman Machine: learned Koopman observables with attention-derived
control for multi-target longitudinal forecasting, plus a classical EDMD
baseline and a verification harness for the stability bounds."""

__version__ = "0.1.0"
