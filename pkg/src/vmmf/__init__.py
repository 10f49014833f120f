"""Regularized relativistic Vlasov-Maxwell particle dynamics and mean-field diagnostics."""

__version__ = "0.1.0"
