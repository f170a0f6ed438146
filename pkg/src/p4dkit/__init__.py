"""Perceptual 4D distillation at desk scale."""
