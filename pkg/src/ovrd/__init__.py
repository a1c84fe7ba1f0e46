"""Open-vocabulary video visual relationship detection.

Frame-wise query-based detection over a frozen vision-language encoder,
feature-based trajectory association, prompted relationship classification,
a four-step training schedule, and the VidVRD-style evaluation protocol.
"""

__version__ = "0.1.0"
