"""Desk-scale 3D segmentation pipeline: shifted-window transformer encoder,
CNN decoder, soft Dice training on partial labels, pseudo-label fine-tuning,
connected-component post-processing, DSC/NSD evaluation."""

__version__ = "0.1.0"
