"""Head avatar fitting: parametric template + neural refinement, optimized
against image sequences through a differentiable software rasterizer."""

__version__ = "0.1.0"
