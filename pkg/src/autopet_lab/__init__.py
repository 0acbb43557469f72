"""Desk-scale PET/CT lesion segmentation lab."""
__version__ = "0.1.0"
