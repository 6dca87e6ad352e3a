"""Task-space control workbench for a simulated hydraulic manipulator."""

__version__ = "0.1.0"
