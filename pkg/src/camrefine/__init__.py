"""camrefine: inference-time refinement of class activation maps into
evaluated segmentation pseudo labels."""

__version__ = "0.1.0"
