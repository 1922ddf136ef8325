"""Token tagger for short web queries with title augmentation, weak labels and adversarial fine-tuning."""

__version__ = "0.1.0"
