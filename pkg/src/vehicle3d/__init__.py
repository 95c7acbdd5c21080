"""Part-based vehicle reconstruction: shape model, pose/shape fitting, texture completion and scoring."""

__version__ = "0.1.0"
