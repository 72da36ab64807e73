"""Glacier mapping toolkit.

Turns multi-band satellite raster tiles and vector glacier labels into
training patches, trains and evaluates a U-Net segmenter alongside pixel
classifier baselines, and serves polygonized predictions to a web-based
correction tool.
"""

__version__ = "0.1.0"
