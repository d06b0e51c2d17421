"""Linear-angular attention laboratory."""
