"""Joint aspect, opinion and sentiment extraction with a sequence encoder and a 2-D GRU pair encoder."""

__version__ = "0.1.0"
