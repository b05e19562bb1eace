"""Scene-graph and depth conditioned generation of camouflage images with
dense annotations, at toy scale."""

__version__ = "0.1.0"
