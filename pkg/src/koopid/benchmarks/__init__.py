"""Ground-truth benchmark systems and dataset generation."""
