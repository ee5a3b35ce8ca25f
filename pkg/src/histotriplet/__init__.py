"""Patch-level representation learning for histopathology.

Learns an embedding of 128x128 tissue patches with a triplet network whose
triplets come from spatial proximity on whole-slide images (or from class
labels on annotated patch sets), then measures how well the frozen
embedding transfers to a labeled target dataset with an SVM trained on
stratified portions under 10-fold cross-validation.
"""

__version__ = "0.1.0"
