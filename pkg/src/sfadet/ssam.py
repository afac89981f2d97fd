"""Spectral-spatial alignment backbone.

A three-stage strided conv encoder with a sparse bottleneck, a mirrored
decoder for self-reconstruction, a small three-level feature pyramid, and
a gradient-reversed domain classifier with the asymmetric focal-style
domain losses. Checkpoints use the flat "SFAW" binary format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ENC_CHANNELS = (16, 32, 64)
FPN_WIDTH = 32
DC_HIDDEN = 16
STRIDE_TOTAL = 8

CKPT_MAGIC = b"SFAW"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _conv_init(rng, out_c, in_c, k):
    """He-normal weights for a k x k conv."""
    std = np.sqrt(2.0 / (in_c * k * k))
    w = Tensor(rng.normal(0.0, std, size=(out_c, in_c, k, k)), requires_grad=True)
    b = Tensor(np.zeros(out_c), requires_grad=True)
    return w, b


@dataclass
class SsamParams:
    """All learnable tensors of the backbone, keyed by name."""

    tensors: dict = field(default_factory=dict)
    in_bands: int = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def parameters(self):
        return list(self.tensors.values())


def init_ssam(in_bands, rng):
    p = SsamParams(in_bands=in_bands)
    t = p.tensors
    c_prev = in_bands
    for i, c in enumerate(ENC_CHANNELS, start=1):
        t[f"enc{i}.w"], t[f"enc{i}.b"] = _conv_init(rng, c, c_prev, 3)
        c_prev = c
    # decoder mirrors: upsample + conv
    dec_out = (ENC_CHANNELS[1], ENC_CHANNELS[0], in_bands)
    c_prev = ENC_CHANNELS[2]
    for i, c in enumerate(dec_out, start=1):
        t[f"dec{i}.w"], t[f"dec{i}.b"] = _conv_init(rng, c, c_prev, 3)
        c_prev = c
    for i, c in enumerate(ENC_CHANNELS, start=1):
        t[f"lat{i}.w"], t[f"lat{i}.b"] = _conv_init(rng, FPN_WIDTH, c, 1)
        t[f"out{i}.w"], t[f"out{i}.b"] = _conv_init(rng, FPN_WIDTH, FPN_WIDTH, 3)
    t["dc1.w"], t["dc1.b"] = _conv_init(rng, DC_HIDDEN, FPN_WIDTH, 1)
    t["dc2.w"], t["dc2.b"] = _conv_init(rng, DC_HIDDEN, DC_HIDDEN, 1)
    t["dc3.w"], t["dc3.b"] = _conv_init(rng, 1, DC_HIDDEN, 1)
    return p


@dataclass
class SsamOutput:
    reconstruction: Tensor   # same shape as the input batch
    bottleneck: Tensor       # stride-8 sparse code, the feature used by SACM
    fpn_levels: list         # [stride2, stride4, stride8]; [2] feeds the classifier
    domain_logit: Tensor     # one scalar per batch element
    encoder_levels: list = None


def ssam_forward(batch: Tensor, params: SsamParams, grl_scale=-0.5,
                 with_decoder=True, with_classifier=True) -> SsamOutput:
    """Run the backbone on an (N, L, H, W) batch."""
    n, l, h, w = batch.shape
    if h % STRIDE_TOTAL or w % STRIDE_TOTAL:
        raise ad.ShapeError(
            f"spatial dims {h}x{w} must be divisible by {STRIDE_TOTAL}; "
            f"pad or crop the cubes first"
        )
    if l != params.in_bands:
        raise ad.ShapeError(
            f"batch has {l} bands but the backbone expects {params.in_bands}"
        )
    t = params.tensors
    e1 = ad.relu(ad.conv2d(batch, t["enc1.w"], t["enc1.b"], stride=2, padding=1))
    e2 = ad.relu(ad.conv2d(e1, t["enc2.w"], t["enc2.b"], stride=2, padding=1))
    e3 = ad.relu(ad.conv2d(e2, t["enc3.w"], t["enc3.b"], stride=2, padding=1))

    recon = None
    if with_decoder:
        d = ad.upsample_nearest2d(e3, 2)
        d = ad.relu(ad.conv2d(d, t["dec1.w"], t["dec1.b"], stride=1, padding=1))
        d = ad.upsample_nearest2d(d, 2)
        d = ad.relu(ad.conv2d(d, t["dec2.w"], t["dec2.b"], stride=1, padding=1))
        d = ad.upsample_nearest2d(d, 2)
        recon = ad.conv2d(d, t["dec3.w"], t["dec3.b"], stride=1, padding=1)

    # feature pyramid: lateral 1x1, top-down nearest-neighbor merge, 3x3 smooth
    l3 = ad.conv2d(e3, t["lat3.w"], t["lat3.b"])
    l2 = ad.add(ad.conv2d(e2, t["lat2.w"], t["lat2.b"]), ad.upsample_nearest2d(l3, 2))
    l1 = ad.add(ad.conv2d(e1, t["lat1.w"], t["lat1.b"]), ad.upsample_nearest2d(l2, 2))
    p1 = ad.conv2d(l1, t["out1.w"], t["out1.b"], padding=1)
    p2 = ad.conv2d(l2, t["out2.w"], t["out2.b"], padding=1)
    p3 = ad.conv2d(l3, t["out3.w"], t["out3.b"], padding=1)
    fpn = [p1, p2, p3]

    logit = None
    if with_classifier:
        logit = classify_domain(p3, params, grl_scale)

    return SsamOutput(recon, e3, fpn, logit, encoder_levels=[e1, e2, e3])


def classify_domain(fpn_level3: Tensor, params: SsamParams, grl_scale=-0.5) -> Tensor:
    """Gradient-reversed 1x1 conv stack pooled to one logit per image."""
    t = params.tensors
    x = ad.grad_reverse(fpn_level3, grl_scale)
    x = ad.relu(ad.conv2d(x, t["dc1.w"], t["dc1.b"]))
    x = ad.relu(ad.conv2d(x, t["dc2.w"], t["dc2.b"]))
    x = ad.conv2d(x, t["dc3.w"], t["dc3.b"])
    n = x.shape[0]
    return ad.reshape(ad.tmean(x, axis=(2, 3)), (n,))


def recon_loss(batch: Tensor, out: SsamOutput, alpha=0.01) -> Tensor:
    """Squared Frobenius reconstruction error plus the L1 sparsity penalty."""
    if out.reconstruction.shape != batch.shape:
        raise ad.ShapeError(
            f"reconstruction {out.reconstruction.shape} vs input {batch.shape}"
        )
    loss = ad.frobenius_sq(ad.sub(out.reconstruction, batch))
    if alpha:
        loss = ad.add(loss, ad.scale(ad.l1_norm(out.bottleneck), alpha))
    return loss


def domain_loss(logit: Tensor, domain: str, beta=2.0, lam=0.25) -> Tensor:
    """Asymmetric focal-style binary loss on per-image domain logits.

    source: -((1-lam)/beta) * log(sigmoid(-beta*D)); target uses lam/beta.
    Written via softplus for numerical stability; mean over the batch.
    """
    if beta <= 0 or not (0.0 < lam < 1.0):
        raise ValueError("need beta > 0 and 0 < lam < 1")
    if not np.all(np.isfinite(logit.data)):
        raise ValueError("domain_loss: non-finite logit")
    if domain == "source":
        coef = (1.0 - lam) / beta
    elif domain == "target":
        coef = lam / beta
    else:
        raise ValueError(f"unknown domain {domain!r}")
    # -log(sigmoid(-beta D)) == softplus(beta D)
    return ad.scale(ad.tmean(ad.softplus(ad.scale(logit, beta))), coef)


# ---------------------------------------------------------------------------
# checkpoint io ("SFAW" flat binary)


def save_params(named_tensors, path):
    """Write {name: Tensor} to the flat SFAW binary format."""
    items = sorted(named_tensors.items())
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(items)))
        for name, t in items:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            dims = t.data.shape
            f.write(struct.pack("<B", len(dims)))
            for d in dims:
                f.write(struct.pack("<I", d))
            f.write(t.data.astype("<f4").tobytes())


def load_params(path):
    """Read an SFAW file back into {name: Tensor} (requires_grad=True)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<HI")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        off += 4 * n
        out[name] = Tensor(vals.reshape(dims).copy(), requires_grad=True)
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after {count} records")
    return out
