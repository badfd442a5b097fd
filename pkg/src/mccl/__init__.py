"""Co-salient object detection with group consensus, contrastive memory and adversarial integrity."""

__version__ = "0.1.0"
