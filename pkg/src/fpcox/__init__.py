"""Joint modeling of longitudinal trajectories and interval-censored event
times (placeholder during build; full public API re-exports added last)."""

__version__ = "0.1.0"
