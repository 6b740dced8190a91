"""Two-view / two-timepoint fusion CAD pipeline on synthetic phantoms."""

__version__ = "0.1.0"
