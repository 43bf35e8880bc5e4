"""Dense body correspondence from depth images via multi-segmentation descriptor learning."""

__version__ = "0.1.0"
