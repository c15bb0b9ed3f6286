"""Feature-based lake plankton classification: ROI features, an MLP
classifier, confidence ensembling and evaluation metrics."""

__version__ = "0.1.0"
