"""Self-aligned three-branch re-identification network on a small numpy autodiff."""

__version__ = "0.1.0"
