"""selrobust: class-selectivity regularization and robustness measurement at desk scale."""

__version__ = "0.1.0"
