"""Toy pose-aware placement benchmark: environment, demos, training, evaluation."""
