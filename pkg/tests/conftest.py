"""Shared builders for model-level tests."""

import numpy as np

from slidevlm.encoders import EmbeddingMatrix, SlideEncoderConfig
from slidevlm.lm import Vocab
from slidevlm.model import ModelConfig, SlideInputs, SlideVLM
from slidevlm.numerics import stream
from slidevlm.slide_io import Region, SlideSpec, synth_slide, tile_slide
from slidevlm.training import TrainSample

TINY_TEXTS = [
    "tumor fills the slide",
    "stroma lines the margin",
    "describe the tissue",
]


def tiny_config(**overrides) -> ModelConfig:
    """A model small enough for per-test training loops."""
    encoder = overrides.pop(
        "encoder",
        SlideEncoderConfig(
            in_dim=8,
            heads=2,
            head_dim=4,
            layers=1,
            ffn_mult=2,
            branches=((4, 1), (8, 2)),
            positional="grid",
            grid_rows=8,
            grid_cols=8,
        ),
    )
    base = dict(
        patch_dim=8,
        patch_size=16,
        projector_layers=1,
        encoder=encoder,
        lm_heads=2,
        lm_head_dim=4,
        lm_layers=1,
        lm_ffn_mult=2,
        max_positions=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, vocab_texts=TINY_TEXTS, **overrides) -> SlideVLM:
    return SlideVLM(tiny_config(**overrides), Vocab.build(vocab_texts), seed=seed)


def random_slides(n, n_patches=3, dim=8, seed=0) -> dict[str, SlideInputs]:
    rng = stream(seed, "test-slides")
    out = {}
    for i in range(n):
        values = rng.normal(size=(n_patches, dim))
        coords = [(p // 4, p % 4) for p in range(n_patches)]
        out[f"s{i}"] = SlideInputs(EmbeddingMatrix(n_patches, dim, values), coords)
    return out


# Eight synthetic slides whose captions describe their layouts. Greedy
# memorization of this set is the standard smoke target; layout-dependent
# captions require a model with grid positional encoding.
PROBE_CAPTIONS = [
    "a single tumor region fills the upper left quadrant",
    "tumor tissue spans the entire top half of the slide",
    "stroma occupies the lower half with clear margins",
    "two separate tumor foci appear in opposite corners",
    "dense stroma fills the right column of the slide",
    "the slide is mostly background with one small tumor focus",
    "tumor and stroma regions share the bottom row evenly",
    "a full slide of uniform tumor tissue without background",
]
PROBE_LAYOUTS = [
    [("tumor", 0, 0, 224, 224)],
    [("tumor", 0, 0, 448, 224)],
    [("stroma", 0, 224, 448, 224)],
    [("tumor", 0, 0, 224, 224), ("tumor", 224, 224, 224, 224)],
    [("stroma", 224, 0, 224, 448)],
    [("tumor", 224, 224, 224, 224)],
    [("tumor", 0, 224, 224, 224), ("stroma", 224, 224, 224, 224)],
    [("tumor", 0, 0, 448, 448)],
]
PROBE_PROMPT = "describe the tissue shown in this whole slide image"


def probe_world(seed=11):
    """Model, samples, and slide inputs for the eight-slide memorization run."""
    vocab = Vocab.build(PROBE_CAPTIONS + [PROBE_PROMPT])
    model = SlideVLM(
        ModelConfig(encoder=SlideEncoderConfig(positional="grid")), vocab, seed=seed
    )
    slides = {}
    samples = []
    for i, (caption, layout) in enumerate(zip(PROBE_CAPTIONS, PROBE_LAYOUTS)):
        spec = SlideSpec(448, 448, 224, [Region(*r) for r in layout])
        raster, _ = synth_slide(100 + i, spec)
        grid = tile_slide(raster)
        emb = model.patch_encoder.encode_grid(raster, grid)
        coords = [(e.row, e.col) for e in grid.tissue_entries()]
        slides[f"s{i}"] = SlideInputs(emb, coords)
        samples.append(TrainSample(f"s{i}", "caption", PROBE_PROMPT, caption))
    return model, samples, slides
