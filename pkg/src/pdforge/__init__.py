"""Pre-training distillation toolkit: sparse teacher logits, KD losses, schedules and a numpy LM."""

from . import distill_losses, errors, logits_codec, logits_store, schedulers, tiny_lm

__version__ = "0.1.0"
__all__ = ["distill_losses", "errors", "logits_codec", "logits_store", "schedulers", "tiny_lm", "__version__"]
