"""Single-image density fields: self-supervised volume rendering with
color sampling on synthetic scenes, plus depth / novel-view / occupancy
evaluation against analytic oracles."""

__version__ = "0.1.0"
