"""Reference external evaluator for the architecture-search engine.

Speaks the engine's line-delimited JSON protocol on standard streams.
Echo mode answers from a fixed triple or a lookup file; toy mode actually
trains each requested architecture on a synthetic shapes task and reports
real segmentation metrics.
"""

from .metrics import confusion_matrix, segmentation_metrics

__all__ = ["confusion_matrix", "segmentation_metrics"]
