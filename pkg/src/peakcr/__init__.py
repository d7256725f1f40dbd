"""peakcr: Confidence regions for the locations of peaks in mean and Cohen's d fields."""

__version__ = "0.1.0"
