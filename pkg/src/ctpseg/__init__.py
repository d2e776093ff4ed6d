"""CT-perfusion stroke lesion segmentation via pseudo-DWI synthesis."""

__version__ = "0.1.0"
