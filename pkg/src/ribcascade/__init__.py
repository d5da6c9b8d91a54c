"""Sequential, anchor-guided rib instance segmentation and labeling in frontal chest radiographs."""

__version__ = "0.1.0"
