"""Stereo event-camera visual odometry toolkit.

Reconstructs semi-dense 3D structure and 6-DoF camera motion from a pair of
synchronized event streams.  Submodules:

- ``geometry``: camera models, SE(3) transforms, Cayley parametrization,
  pose trajectories with interpolation, calibration/trajectory files.
- ``time_surface``: exponentially decayed event recency maps and their
  negatives, blurring, sub-pixel sampling.
- ``mapping``: per-event inverse depth estimation across a stereo pair of
  time surfaces, Student's-t uncertainty, probabilistic depth fusion.
- ``tracking``: pose registration of a semi-dense map against the time
  surface negative (forward-compositional LM with Huber IRLS).
- ``simulator``: ideal DVS event synthesis from planar edge scenes with
  ground-truth trajectory and depth.
- ``pipeline``: end-to-end run loop, evaluation metrics (ATE/RPE), CLI glue.
"""

__version__ = "0.1.0"
