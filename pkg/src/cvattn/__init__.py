"""Chan-Vese attention U-Net on a small numpy autodiff engine.

Kept import-light on purpose: the CLI sets thread limits before numpy and
numba load.  Import submodules directly (``cvattn.chan_vese``, ``cvattn.unet``...).
"""

__version__ = "0.1.0"
