"""MISO: unpaired multimodal translation trained with a stochastic mutual-information loss."""

__version__ = "0.1.0"
