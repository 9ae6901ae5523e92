"""The assembled model: shared encoder, three part streams, BNNecks, heads, decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoder import ConfigError, Encoder, EncoderConfig
from .fcd import FcdConfig, FeatureCompletionDecoder
from .numerics import Module, Tensor
from .streams import BNNeck, FeatureTriplet, Heads, PartLayer, Stream, StreamFeatures


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fcd: FcdConfig = field(default_factory=FcdConfig)
    n_ids: int = 8
    use_fcd: bool = True

    def validate(self) -> list[str]:
        errs = self.encoder.validate()
        if self.use_fcd:
            errs += self.fcd.validate(self.encoder.n_patches)
        if self.n_ids < 2:
            errs.append("n_ids must be >= 2")
        return errs


@dataclass
class ForwardOutput:
    triplet: FeatureTriplet
    f_ht: Tensor            # holistic patch tokens, B x N x C
    f_ot: Tensor            # occluded patch tokens, B x N x C
    f_cp: Tensor | None     # completed patch tokens, B x N x C


class _Streams(Module):
    def __init__(self, cfg: EncoderConfig, use_fcd: bool, rng):
        super().__init__()
        args = (cfg.dim, cfg.heads, cfg.m_parts, rng, cfg.mlp_ratio)
        self.holistic = PartLayer(*args)
        self.occluded = PartLayer(*args)
        if use_fcd:
            self.completed = PartLayer(*args)


class _Necks(Module):
    def __init__(self, cfg: EncoderConfig, use_fcd: bool):
        super().__init__()
        self.holistic = BNNeck(cfg.dim, cfg.m_parts)
        self.occluded = BNNeck(cfg.dim, cfg.m_parts)
        if use_fcd:
            self.completed = BNNeck(cfg.dim, cfg.m_parts, with_global=False)


class FCFormer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        errs = cfg.validate()
        if errs:
            raise ConfigError("; ".join(errs))
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xFCF])
        ec = cfg.encoder
        self.encoder = Encoder(ec, rng)
        self.stream = _Streams(ec, cfg.use_fcd, rng)
        self.bnneck = _Necks(ec, cfg.use_fcd)
        self.head = Heads(ec.dim, cfg.n_ids, rng)
        if cfg.use_fcd:
            self.fcd = FeatureCompletionDecoder(cfg.fcd, ec.n_patches, ec.dim, ec.heads, rng, ec.mlp_ratio)
        self.assign_names()

    def forward_stream(self, seq: Tensor, which: Stream, global_: StreamFeatures | None = None) -> StreamFeatures:
        """Part features of one stream. The completed stream borrows the occluded global feature."""
        which = Stream(which)
        layer = getattr(self.stream, which.value)
        neck = getattr(self.bnneck, which.value)
        parts = layer(seq)
        parts_bn = neck.parts(parts)
        if which is Stream.COMPLETED:
            if global_ is None:
                raise ValueError("completed stream needs the occluded stream's global features")
            return StreamFeatures(global_.global_, parts, global_.global_bn, parts_bn)
        g = seq[:, 0]
        return StreamFeatures(g, parts, neck.global_(g), parts_bn)

    def complete(self, seq_o: Tensor, occluded: StreamFeatures) -> tuple[Tensor, StreamFeatures]:
        b, _, c = seq_o.shape
        f_og, f_ot = seq_o[:, 0], seq_o[:, 1:]
        f_cp = self.fcd(f_og, f_ot)
        seq_c = nx.concat([f_og.reshape(b, 1, c), f_cp], axis=1)
        return f_cp, self.forward_stream(seq_c, Stream.COMPLETED, occluded)

    def __call__(self, holistic: np.ndarray, occluded: np.ndarray, cams) -> ForwardOutput:
        """Training forward over an aligned batch of (holistic, occluded) image pairs."""
        b = len(holistic)
        cams = np.asarray(cams)
        # one shared-encoder pass over both halves; rows never interact
        seq = self.encoder(np.concatenate([holistic, occluded]), np.concatenate([cams, cams]))
        seq_h, seq_o = seq[:b], seq[b:]
        hol = self.forward_stream(seq_h, Stream.HOLISTIC)
        occ = self.forward_stream(seq_o, Stream.OCCLUDED)
        f_cp, comp = None, None
        if self.cfg.use_fcd:
            f_cp, comp = self.complete(seq_o, occ)
        return ForwardOutput(FeatureTriplet(hol, occ, comp), seq_h[:, 1:], seq_o[:, 1:], f_cp)

    def extract(self, images: np.ndarray, cams, include_holistic_parts: bool = False) -> np.ndarray:
        """Retrieval descriptors [global | occluded parts | completed parts], L2-normalised rows."""
        if self.training:
            raise RuntimeError("extract() needs an eval-mode model (call model.eval())")
        with nx.no_grad():
            seq = self.encoder(images, cams)
            occ = self.forward_stream(seq, Stream.OCCLUDED)
            b = seq.shape[0]
            blocks = [occ.global_bn.data, occ.parts_bn.data.reshape(b, -1)]
            if self.cfg.use_fcd:
                _, comp = self.complete(seq, occ)
                blocks.append(comp.parts_bn.data.reshape(b, -1))
            if include_holistic_parts:
                blocks.append(self.forward_stream(seq, Stream.HOLISTIC).parts_bn.data.reshape(b, -1))
        feats = np.concatenate(blocks, axis=1).astype(np.float64)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return feats / np.maximum(norms, 1e-12)
