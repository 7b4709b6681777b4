"""Two-stage cascade: a coarse U-shaped subnetwork produces a probability
map that the fine subnetwork consumes (as a second input channel and, via
cross-stage skip taps, at every encoder level).

Level numbering is 1-based in names and documentation: level 1 is full
resolution, level 4 is 1/8. Skip fusion is addition at levels 1-2 and
concatenation at levels 3-4; the decoder mirrors the encoder channel plan so
the add-mode fusions are well-typed.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .blocks import (PlainConv, R2Jump, SCSELite, UpConv, fuse_skip,
                     make_stage_block)

DESK_CHANNELS = (8, 16, 32, 64)
PAPER_CHANNELS = (32, 64, 128, 256)


@dataclass
class ModelConfig:
    levels: int = 4
    channels: tuple = DESK_CHANNELS
    recurrence: tuple = (4, 3, 2, 1)
    input_size: int = 64
    use_r2jump: bool = True
    use_inception: bool = True
    use_mcskip: bool = True
    use_scse: bool = True
    dropout_rate: float = 0.2
    dropout_after_scse: bool = False
    seed: int = 0

    def validate(self):
        if self.levels < 2:
            raise ValueError(f"need at least 2 levels, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ValueError(
                f"channels has {len(self.channels)} entries for {self.levels} levels")
        if len(self.recurrence) != self.levels:
            raise ValueError(
                f"recurrence has {len(self.recurrence)} entries for "
                f"{self.levels} levels")
        if self.input_size % (1 << (self.levels - 1)):
            raise ValueError(
                f"input_size {self.input_size} not divisible by "
                f"{1 << (self.levels - 1)}")
        if self.use_scse and self.channels[-1] % 2:
            raise ValueError("bottleneck channel count must be even for the "
                             "attention gate's c/2 reduction")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if any(t < 1 for t in self.recurrence):
            raise ValueError("recurrence steps must all be >= 1")
        return self

    @classmethod
    def desk(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides):
        overrides.setdefault("channels", PAPER_CHANNELS)
        overrides.setdefault("input_size", 512)
        return cls(**overrides)

    def with_overrides(self, **overrides):
        return replace(self, **overrides)


class _SubNet:
    """One U-shaped stage. The fine stage additionally owns the cross-stage
    skip taps (psi), bottleneck dropout and the attention gate."""

    def __init__(self, rng, cfg, in_channels, dtype, fine):
        ch, L = cfg.channels, cfg.levels
        self.cfg = cfg
        self.fine = fine
        self.enc = [make_stage_block(rng, in_channels if i == 0 else ch[i - 1],
                                     ch[i], dtype, cfg.use_inception)
                    for i in range(L)]
        self.bottleneck = make_stage_block(rng, ch[-1], ch[-1], dtype,
                                           cfg.use_inception)
        self.psi = {}
        if fine and cfg.use_mcskip:
            for i in range(L):
                for k in range(i, min(i + 3, L)):
                    self.psi[(k, i)] = PlainConv(rng, ch[k], ch[i], 3, dtype)
        self.scse = SCSELite(rng, ch[-1], dtype) if fine and cfg.use_scse else None
        self.r2j = ([R2Jump(rng, ch[i], cfg.recurrence[i], dtype) for i in range(L)]
                    if cfg.use_r2jump else None)
        self.up = [UpConv(rng, ch[i + 1], ch[i], dtype) for i in range(L - 1)]
        self.dec = [make_stage_block(rng, 2 * ch[i] if i >= 2 else ch[i], ch[i],
                                     dtype, cfg.use_inception)
                    for i in range(L)]
        self.head = PlainConv(rng, ch[0], 1, 1, dtype)

    def encode(self, x, mode, injections=None):
        feats = []
        h = x
        for i, block in enumerate(self.enc):
            if i > 0:
                h, _ = T.maxpool2x2(h)
            h = block(h, mode)
            if injections is not None:
                h = T.add(h, injections[i])
            feats.append(h)
        return feats

    def decode(self, enc_feats, mode, rng=None):
        b = self.bottleneck(enc_feats[-1], mode)
        if self.fine:
            if not self.cfg.dropout_after_scse:
                b = self._dropout(b, mode, rng)
            if self.scse is not None:
                b = self.scse(b)
            if self.cfg.dropout_after_scse:
                b = self._dropout(b, mode, rng)
        d = b
        feats = [None] * len(self.enc)
        for i in reversed(range(len(self.enc))):
            if i < len(self.enc) - 1:
                d = self.up[i](d)
            skip = self.r2j[i](enc_feats[i]) if self.r2j else enc_feats[i]
            d = fuse_skip(skip, d, "add" if i < 2 else "concat")
            d = self.dec[i](d, mode)
            feats[i] = d
        prob = T.activation(self.head(feats[0]), "sigmoid")
        return prob, feats

    def _dropout(self, x, mode, rng):
        rate = self.cfg.dropout_rate
        if mode == "train" and rate > 0.0 and rng is None:
            raise ValueError("training with dropout needs an rng")
        return T.dropout(x, rate, rng, mode)

    def named_params(self):
        L = len(self.enc)
        out = []
        for i in range(L):
            out += [(f"enc{i + 1}.{n}", p) for n, p in self.enc[i].named_params()]
        out += [(f"bottleneck.{n}", p) for n, p in self.bottleneck.named_params()]
        for (k, i) in sorted(self.psi):
            out += [(f"psi.k{k + 1}i{i + 1}.{n}", p)
                    for n, p in self.psi[(k, i)].named_params()]
        if self.scse is not None:
            out += [(f"scse.{n}", p) for n, p in self.scse.named_params()]
        if self.r2j:
            for i in range(L):
                out += [(f"skip{i + 1}.{n}", p)
                        for n, p in self.r2j[i].named_params()]
        for i in range(L - 1):
            out += [(f"up{i + 1}.{n}", p) for n, p in self.up[i].named_params()]
        for i in range(L):
            out += [(f"dec{i + 1}.{n}", p) for n, p in self.dec[i].named_params()]
        out += [(f"head.{n}", p) for n, p in self.head.named_params()]
        return out

    def named_buffers(self):
        L = len(self.enc)
        out = []
        for i in range(L):
            out += [(f"enc{i + 1}.{n}", d, k)
                    for n, d, k in self.enc[i].named_buffers()]
        out += [(f"bottleneck.{n}", d, k)
                for n, d, k in self.bottleneck.named_buffers()]
        for i in range(L):
            out += [(f"dec{i + 1}.{n}", d, k)
                    for n, d, k in self.dec[i].named_buffers()]
        return out


class Model:
    def __init__(self, cfg, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        self.coarse = _SubNet(rng, cfg, 1, self.dtype, fine=False)
        self.fine = _SubNet(rng, cfg, 2, self.dtype, fine=True)
        names = [n for n, _ in self.named_parameters()]
        if len(names) != len(set(names)):
            raise AssertionError("parameter names are not unique")
        for name, p in self.named_parameters():
            p.name = name
            p.requires_grad = True

    def _check_input(self, image):
        s = self.cfg.input_size
        shape = image.data.shape
        if len(shape) != 4 or shape[1] != 1 or shape[2] != s or shape[3] != s:
            raise ValueError(f"expected input (n,1,{s},{s}), got {shape}")

    def coarse_forward(self, image, mode):
        """First stage: probability map plus per-level decoder features
        (kept for the cross-stage skips)."""
        self._check_input(image)
        enc = self.coarse.encode(image, mode)
        return self.coarse.decode(enc, mode)

    def mc_skip_aggregate(self, decoder_feats, i):
        """G_i: sum over levels k = i..min(i+2, levels) of a 3x3 tap applied
        to the bilinearly upsampled coarse decoder feature D_k. 0-based i."""
        total = None
        for k in range(i, min(i + 3, self.cfg.levels)):
            up = T.bilinear_upsample(decoder_feats[k], 1 << (k - i))
            term = self.fine.psi[(k, i)](up)
            total = term if total is None else T.add(total, term)
        return total

    def fine_forward(self, image, p_coarse, decoder_feats, mode, rng=None):
        """Second stage: consumes the image stacked with the coarse map, and
        injects aggregated coarse decoder features at every encoder level."""
        self._check_input(image)
        if self.cfg.use_mcskip:
            if decoder_feats is None:
                raise ValueError("decoder_feats required when use_mcskip is on")
            inj = [self.mc_skip_aggregate(decoder_feats, i)
                   for i in range(self.cfg.levels)]
        else:
            inj = None
        x = T.concat_channels([image, p_coarse])
        enc = self.fine.encode(x, mode, inj)
        prob, _ = self.fine.decode(enc, mode, rng)
        return prob

    def forward(self, image, mode, rng=None):
        """Full cascade. Returns (coarse probability map, fine probability
        map); both feed the training objective."""
        p_coarse, feats = self.coarse_forward(image, mode)
        p_fine = self.fine_forward(image, p_coarse, feats, mode, rng)
        return p_coarse, p_fine

    def named_parameters(self):
        return ([(f"coarse.{n}", p) for n, p in self.coarse.named_params()]
                + [(f"fine.{n}", p) for n, p in self.fine.named_params()])

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        return ([(f"coarse.{n}", d, k) for n, d, k in self.coarse.named_buffers()]
                + [(f"fine.{n}", d, k) for n, d, k in self.fine.named_buffers()])

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def count_parameters(self):
        return sum(p.data.size for p in self.parameters())


def build_model(cfg, dtype=np.float32):
    """Deterministic build: same config (including seed) gives bit-identical
    parameters."""
    return Model(cfg, dtype)
