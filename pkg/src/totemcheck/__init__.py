"""Refractive-totem scene reconstruction and image manipulation detection."""
import os

# the TBB layer shipped here is too old for numba; pick a portable one
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
