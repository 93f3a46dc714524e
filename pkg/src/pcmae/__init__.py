"""pcmae: masked-autoencoder pre-training for point clouds, from scratch.

Patch-based dual-branch mask reconstruction (global random + local block
masking) with a share-parameter transformer encoder, per-layer local
feature enhancement via edge convolution over neighbouring patch tokens,
and the training / probing / evaluation harnesses around it.  Runs on a
minimal NumPy reverse-mode autodiff engine; no ML framework required.
"""

__version__ = "0.1.0"
