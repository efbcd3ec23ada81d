"""Desk-scale whole-slide vision-language pipeline.

Tiling and tissue filtering for slide rasters, a dilated sparse-attention
slide encoder feeding a tiny multimodal language model, two-stage training,
attention-based patch saliency, a captioning/VQA evaluation harness, and an
LLM-driven instruction-data curation pipeline.
"""

__version__ = "0.1.0"
