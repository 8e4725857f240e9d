"""Unsupervised hyperspectral and multispectral image fusion by modality decoupling."""
