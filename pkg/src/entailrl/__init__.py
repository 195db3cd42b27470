"""Reference-free RL fine-tuning of sequence policies with entailment rewards."""

__version__ = "0.1.0"
