"""Cross-scale masked-autoencoder pretraining on numpy.

Self-supervised pretraining for image encoders built from scratch: a
reverse-mode tensor engine, a masked vision-transformer autoencoder, a
two-branch scale augmentation with consistency losses, and a frozen-encoder
nearest-neighbour evaluation harness.
"""

__version__ = "0.1.0"
