"""scamkit: weakly supervised visual-audio fixation prediction at desk scale."""

__version__ = "0.1.0"
