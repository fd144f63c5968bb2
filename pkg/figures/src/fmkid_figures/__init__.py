"""Figure rendering for fmkid experiment outputs.

This package reads only the CSV traces and report files an experiment
run leaves behind — it has no code dependency on the fmkid library.
"""

from .render import FIGURES, SpecError, load_spec, render

__all__ = ["FIGURES", "SpecError", "load_spec", "render"]
