"""Frozen vision-transformer embedding exporter for .spffemb datasets."""

from .backbone import BACKBONES, VisionTransformer, build_backbone
from .export import ExportJob, export, preprocess, scan_image_tree
from .fileio import ExportedItem, VerifyReport, verify, write_embedding_file

__version__ = "0.1.0"
