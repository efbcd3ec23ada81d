"""The assembled pipeline: patch features -> slide encoder -> projector -> LM.

Parameters live in four named groups (patch_encoder, slide_encoder,
projector, lm) so the training stages can freeze and thaw them as sets.
The patch encoder group is permanently frozen. With the bypass flag the
slide encoder is never constructed and patch features feed the projector
directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import (
    EmbeddingMatrix,
    PatchEncoder,
    Projector,
    SlideEncoder,
    SlideEncoderConfig,
)
from .interpret import AttentionTrace
from .lm import DecoderConfig, DecoderLM, MultimodalSequence, Vocab, assemble
from .numerics import Parameter, Tensor, UsageError

__all__ = ["ModelConfig", "SlideVLM", "SlideInputs"]

GROUPS = ("patch_encoder", "slide_encoder", "projector", "lm")


@dataclass
class ModelConfig:
    patch_dim: int = 32
    patch_size: int = 224
    projector_layers: int = 1
    bypass_slide_encoder: bool = False
    encoder: SlideEncoderConfig = field(default_factory=SlideEncoderConfig)
    lm_heads: int = 4
    lm_head_dim: int = 32
    lm_layers: int = 2
    lm_ffn_mult: int = 4
    max_positions: int = 256
    tied_head: bool = False
    causal_visual: bool = False

    def __post_init__(self):
        if self.encoder.in_dim != self.patch_dim:
            raise UsageError(
                f"encoder in_dim {self.encoder.in_dim} != patch_dim {self.patch_dim}"
            )

    @property
    def lm_dim(self) -> int:
        return self.lm_heads * self.lm_head_dim


@dataclass
class SlideInputs:
    """Per-slide model inputs: patch features plus optional grid coords."""

    embeddings: EmbeddingMatrix
    coords: list[tuple[int, int]] | None = None


class SlideVLM:
    """Pipeline model over one slide's patch features and a text prompt."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        self.patch_encoder = PatchEncoder(cfg.patch_dim, cfg.patch_size, seed=seed)
        self.slide_encoder = None
        proj_in = cfg.patch_dim
        if not cfg.bypass_slide_encoder:
            self.slide_encoder = SlideEncoder(cfg.encoder, seed=seed)
            proj_in = cfg.encoder.model_dim
        self.projector = Projector(proj_in, cfg.lm_dim, layers=cfg.projector_layers, seed=seed)
        self.lm = DecoderLM(
            DecoderConfig(
                vocab_size=len(vocab),
                heads=cfg.lm_heads,
                head_dim=cfg.lm_head_dim,
                layers=cfg.lm_layers,
                ffn_mult=cfg.lm_ffn_mult,
                max_positions=cfg.max_positions,
                tied_head=cfg.tied_head,
                causal_visual=cfg.causal_visual,
            ),
            seed=seed,
        )

    def params(self) -> list[Parameter]:
        out = list(self.patch_encoder.params())
        if self.slide_encoder is not None:
            out.extend(self.slide_encoder.params())
        out.extend(self.projector.params())
        out.extend(self.lm.params())
        return out

    def param_groups(self) -> dict[str, list[Parameter]]:
        groups: dict[str, list[Parameter]] = {g: [] for g in GROUPS}
        for p in self.params():
            groups[p.name.split(".", 1)[0]].append(p)
        return {g: ps for g, ps in groups.items() if ps}

    def set_trainable_groups(self, trainable: set[str]) -> None:
        if "patch_encoder" in trainable:
            raise UsageError("the patch encoder is permanently frozen")
        unknown = trainable - set(GROUPS)
        if unknown:
            raise UsageError(f"unknown parameter groups: {sorted(unknown)}")
        for group, params in self.param_groups().items():
            flag = group in trainable
            for p in params:
                if group == "patch_encoder":
                    flag = False
                p.set_trainable(flag)

    def visual_tokens(self, inputs: SlideInputs) -> Tensor:
        """Project patch features into LM space, through or around the encoder."""
        if self.slide_encoder is None:
            return self.projector(inputs.embeddings.values)
        return self.projector(self.slide_encoder(inputs.embeddings, inputs.coords))

    def sequence(
        self, inputs: SlideInputs, prompt: str, answer: str | None
    ) -> MultimodalSequence:
        return assemble(self.visual_tokens(inputs), prompt, answer, self.vocab)

    def loss(self, inputs: SlideInputs, prompt: str, answer: str) -> Tensor:
        return self.lm.loss(self.sequence(inputs, prompt, answer))

    def generate(
        self,
        inputs: SlideInputs,
        prompt: str,
        max_len: int = 32,
        capture_attention: bool = True,
    ) -> tuple[str, AttentionTrace | None]:
        seq = self.sequence(inputs, prompt, None)
        ids, trace = self.lm.generate(seq, max_len=max_len, capture_attention=capture_attention)
        if trace is not None and inputs.coords is not None:
            trace.coords = list(inputs.coords)
        if trace is not None:
            trace.tokens = [self.vocab.token(i) for i in ids]
        return self.vocab.decode(ids), trace

    def tensors(self) -> dict[str, np.ndarray]:
        """Parameter name -> value array, for checkpointing."""
        return {p.name: p.value.data for p in self.params()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        """Copy checkpointed arrays in; the name set and shapes must match."""
        own = {p.name: p for p in self.params()}
        if set(own) != set(tensors):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise UsageError(
                f"checkpoint does not match model (missing {missing}, extra {extra})"
            )
        for name, param in own.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != param.value.data.shape:
                raise UsageError(
                    f"{name}: checkpoint shape {arr.shape} != model shape "
                    f"{param.value.data.shape}"
                )
            param.value.data[...] = arr
