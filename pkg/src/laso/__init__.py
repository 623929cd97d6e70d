"""Non-autoregressive speech recognition with a position-dependent summarizer, on a from-scratch numpy autodiff."""

__version__ = "0.1.0"
