"""Motion-model supervision and evaluation toolbox for odometry trajectories."""

from . import cli, metrics, ppnet, se3, supervision, synth, trajectory

__all__ = ["se3", "trajectory", "ppnet", "supervision", "metrics", "synth", "cli"]
__version__ = "0.1.0"
