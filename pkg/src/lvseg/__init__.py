"""Left-ventricle segmentation in short-axis cardiac MRI.

A convolutional detector locates the LV, a stacked autoencoder infers its
shape, and a level set with a shape prior refines the contour. Contours
along a stack are then aligned to a smooth center curve.
"""
__version__ = "0.1.0"
