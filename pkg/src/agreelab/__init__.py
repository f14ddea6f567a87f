"""agreelab: saliency-method agreement lab for small attention-RNN classifiers."""

__version__ = "0.1.0"
