"""detforge: automated object-detection data pipeline.

Open-vocabulary pseudo-labeling, reviewer gating, subject-driven data
diversification, dataset mixing, and COCO-style evaluation, with all model
inference delegated to pluggable backends over a JSON wire protocol.
"""

__version__ = "0.1.0"
