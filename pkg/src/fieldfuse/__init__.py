"""Registration and blending of independently trained radiance fields.

Pipeline stages: per-agent bundle adjustment, co-view retrieval across
agents, frame-to-model pose recovery, model-to-model transform refinement,
and blended rendering with inverse-distance weighting.
"""

__version__ = "0.1.0"
