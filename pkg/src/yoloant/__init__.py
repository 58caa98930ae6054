"""Building blocks, graphs, profiler and evaluator for the YOLO-Ant detector."""

__version__ = "0.1.0"
