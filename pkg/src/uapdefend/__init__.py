"""Defense framework against universal adversarial perturbations:
perturbation generation (real and synthetic), a rectifying pre-input
network, a DCT-feature detector, and the evaluation harness."""

__version__ = "0.1.0"
