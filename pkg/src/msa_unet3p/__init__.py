"""MSA-UNet3+ segmentation with supervised prototypical contrastive loss."""

__version__ = "0.1.0"
