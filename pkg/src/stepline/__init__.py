"""stepline: incremental runner, reporter and linter for analysis pipelines."""

__version__ = "0.1.0"
