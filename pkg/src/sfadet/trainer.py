"""Two-flow adversarial training loop and the inference path.

Each step runs the source flow (reconstruction, domain loss, spectral
autocorrelation alignment against target features, RPN + ROI with source
labels) and the target flow (reconstruction, domain loss, RPN), then takes
one Adam step on the weighted total. Ablation modes drop the alignment
terms to reproduce the w/o-SACM and w/o-SSAM+SACM configurations.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import detect, sacm, ssam
from .autodiff import Tensor
from .hsi import match_bands

ABLATIONS = ("full", "no_sacm", "no_ssam_sacm")
TARGET_RPN_MODES = ("background", "off")

LOSS_FIELDS = ("l_s_r", "l_s_d", "l_sacm", "l_s_rpn", "l_roi",
               "l_t_r", "l_t_d", "l_t_rpn")


class NonFiniteLossError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epsilon: float = 0.5
    eta: float = 0.5
    tau: float = 0.2
    beta: float = 2.0
    lam: float = 0.25          # "lambda" in config files
    grl_scale: float = -0.5
    alpha: float = 0.01
    lr: float = 3e-4
    iterations: int = 500
    batch_size: int = 2
    ablation: str = "full"
    seed: int = 0
    sacm_normalize: bool = False
    target_rpn: str = "background"
    proposals_train: int = 12
    proposals_infer: int = 50

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.target_rpn not in TARGET_RPN_MODES:
            raise ConfigError(f"unknown target_rpn mode {self.target_rpn!r}")
        if min(self.epsilon, self.eta, self.tau) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not (0.0 < self.lam < 1.0):
            raise ConfigError("lambda must lie in (0, 1)")


_BOOL_FIELDS = {"sacm_normalize"}
_INT_FIELDS = {"iterations", "batch_size", "seed", "proposals_train",
               "proposals_infer"}
_STR_FIELDS = {"ablation", "target_rpn"}


def save_config(cfg: TrainConfig, path):
    with open(path, "w") as f:
        for k, v in asdict(cfg).items():
            key = "lambda" if k == "lam" else k
            f.write(f"{key}={v}\n")


def load_config(path, **overrides) -> TrainConfig:
    """Parse a flat key=value config file; unknown keys are errors."""
    kv = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    known = {("lambda" if f == "lam" else f) for f in TrainConfig.__dataclass_fields__}
    for k in kv:
        if k not in known:
            raise ConfigError(f"{path}: unknown config key {k!r}")
    args = {}
    for k, v in kv.items():
        f = "lam" if k == "lambda" else k
        if f in _BOOL_FIELDS:
            args[f] = v.lower() in ("1", "true", "yes")
        elif f in _INT_FIELDS:
            args[f] = int(v)
        elif f in _STR_FIELDS:
            args[f] = v
        else:
            args[f] = float(v)
    args.update(overrides)
    return TrainConfig(**args)


@dataclass
class LossBreakdown:
    l_s_r: float = 0.0
    l_s_d: float = 0.0
    l_sacm: float = 0.0
    l_s_rpn: float = 0.0
    l_roi: float = 0.0
    l_t_r: float = 0.0
    l_t_d: float = 0.0
    l_t_rpn: float = 0.0
    total: float = 0.0

    def recombined(self, cfg: TrainConfig) -> float:
        return (cfg.epsilon * self.l_s_r + cfg.eta * self.l_s_d
                + cfg.tau * self.l_sacm + self.l_s_rpn + self.l_roi
                + cfg.epsilon * self.l_t_r + cfg.eta * self.l_t_d
                + self.l_t_rpn)


def standardize_cube(values):
    """Per-band zero-mean unit-variance scaling of an (L, H, W) array."""
    v = np.asarray(values, dtype=np.float32)
    mean = v.mean(axis=(1, 2), keepdims=True, dtype=np.float64)
    std = v.std(axis=(1, 2), keepdims=True, dtype=np.float64)
    return ((v - mean) / (std + 1e-6)).astype(np.float32)


def _batch_tensor(cubes):
    return Tensor(np.stack([standardize_cube(c.values) for c in cubes]))


@dataclass
class TrainState:
    cfg: TrainConfig
    params: dict                  # name -> Tensor (backbone + heads)
    num_classes: int
    in_bands: int
    optimizer: ad.Adam
    rng: np.random.Generator
    anchors: list = None
    step: int = 0

    def trainable(self):
        return self.params


def init_state(cfg: TrainConfig, in_bands, num_classes) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    sp = ssam.init_ssam(in_bands, rng)
    dp = detect.init_detect_params(num_classes, rng)
    params = dict(sp.tensors)
    params.update(dp)
    active = _active_params(params, cfg)
    opt = ad.Adam(active, lr=cfg.lr)
    return TrainState(cfg=cfg, params=params, num_classes=num_classes,
                      in_bands=in_bands, optimizer=opt, rng=rng)


def _active_params(params, cfg):
    """Parameters that receive gradients under the configured ablation."""
    skip_prefixes = ()
    if cfg.ablation == "no_ssam_sacm":
        skip_prefixes = ("dec", "dc")
    return [t for k, t in sorted(params.items())
            if not k.startswith(skip_prefixes)]


def _ssam_params_view(state):
    p = ssam.SsamParams(in_bands=state.in_bands)
    p.tensors = state.params
    return p


def _per_image_rpn_loss(state, logits, deltas, gt_boxes_list, rng):
    """Mean RPN loss over the batch; gt lists may be empty (background)."""
    n = logits[0].shape[0]
    terms = []
    for i in range(n):
        lf = ad.concat([ad.take_row(l, i) for l in logits], axis=0)
        df = ad.concat([ad.take_row(d, i) for d in deltas], axis=0)
        allanch = np.concatenate(state.anchors, axis=0)
        terms.append(detect.rpn_loss(lf, df, allanch, gt_boxes_list[i], rng))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / n)


def train_step(state: TrainState, source_samples, target_cubes) -> LossBreakdown:
    """One optimization step of the two-flow procedure."""
    cfg = state.cfg
    sp = _ssam_params_view(state)
    use_ae = cfg.ablation != "no_ssam_sacm"
    use_sacm = cfg.ablation == "full"

    src = _batch_tensor([s.cube for s in source_samples])
    tgt = _batch_tensor(target_cubes)
    if state.anchors is None:
        h, w = src.shape[2], src.shape[3]
        state.anchors = detect.generate_anchors(
            [(h // s, w // s) for s in detect.STRIDES]
        )

    src_out = ssam.ssam_forward(src, sp, cfg.grl_scale,
                                with_decoder=use_ae, with_classifier=use_ae)
    tgt_out = ssam.ssam_forward(tgt, sp, cfg.grl_scale,
                                with_decoder=use_ae, with_classifier=use_ae)

    terms = {}
    zero = Tensor(np.float32(0.0))
    if use_ae:
        terms["l_s_r"] = ssam.recon_loss(src, src_out, cfg.alpha)
        terms["l_t_r"] = ssam.recon_loss(tgt, tgt_out, cfg.alpha)
        terms["l_s_d"] = ssam.domain_loss(src_out.domain_logit, "source",
                                          cfg.beta, cfg.lam)
        terms["l_t_d"] = ssam.domain_loss(tgt_out.domain_logit, "target",
                                          cfg.beta, cfg.lam)
    else:
        terms["l_s_r"] = terms["l_t_r"] = zero
        terms["l_s_d"] = terms["l_t_d"] = zero
    if use_sacm:
        terms["l_sacm"] = sacm.sacm_loss(src_out.bottleneck, tgt_out.bottleneck,
                                         normalize=cfg.sacm_normalize)
    else:
        terms["l_sacm"] = zero

    gt_boxes = [list(s.boxes) for s in source_samples]
    gt_classes = [list(s.classes) for s in source_samples]
    # anchor sampling uses a function of the batch inputs only, so a step
    # with identical inputs and parameters yields an identical loss
    rpn_rng = np.random.default_rng(cfg.seed)
    s_logits, s_deltas = detect.rpn_forward(src_out.fpn_levels, state.params)
    terms["l_s_rpn"] = _per_image_rpn_loss(state, s_logits, s_deltas, gt_boxes,
                                           rpn_rng)

    # proposals for the ROI head: RPN output plus injected gt boxes, and
    # jittered gt copies so the box-refinement branch sees non-zero targets
    props = detect.rpn_proposals(s_logits, s_deltas, state.anchors,
                                 src.shape[2], post_nms=cfg.proposals_train)
    proposals = []
    for i in range(len(source_samples)):
        boxes = [np.asarray(b, dtype=np.float64) for b in gt_boxes[i]]
        for b in gt_boxes[i]:
            x, y, w, h = b
            for _ in range(4):
                jw = max(2.0, w * rpn_rng.uniform(0.5, 1.6))
                jh = max(2.0, h * rpn_rng.uniform(0.5, 1.6))
                jx = x + rpn_rng.uniform(-0.35, 0.35) * w
                jy = y + rpn_rng.uniform(-0.35, 0.35) * h
                boxes.append(np.array([jx, jy, jw, jh]))
        boxes.extend(props[i][0])
        proposals.append(boxes)
    terms["l_roi"] = detect.roi_loss(
        src_out.fpn_levels, proposals,
        [(np.asarray(b).reshape(-1, 4), c) for b, c in zip(gt_boxes, gt_classes)],
        state.params,
    )

    if cfg.target_rpn == "background":
        t_logits, t_deltas = detect.rpn_forward(tgt_out.fpn_levels, state.params)
        terms["l_t_rpn"] = _per_image_rpn_loss(
            state, t_logits, t_deltas, [[] for _ in target_cubes], rpn_rng
        )
    else:
        terms["l_t_rpn"] = zero

    total = ad.add(
        ad.add(
            ad.add(ad.scale(terms["l_s_r"], cfg.epsilon),
                   ad.scale(terms["l_s_d"], cfg.eta)),
            ad.add(ad.scale(terms["l_sacm"], cfg.tau), terms["l_s_rpn"]),
        ),
        ad.add(
            ad.add(terms["l_roi"], ad.scale(terms["l_t_r"], cfg.epsilon)),
            ad.add(ad.scale(terms["l_t_d"], cfg.eta), terms["l_t_rpn"]),
        ),
    )

    breakdown = LossBreakdown(
        **{k: float(v.data) for k, v in terms.items()}, total=float(total.data)
    )
    for name in LOSS_FIELDS:
        if not np.isfinite(getattr(breakdown, name)):
            raise NonFiniteLossError(f"loss term {name} became non-finite")

    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.optimizer.zero_grad()
    state.step += 1
    return breakdown


def _atomic_save(named, path):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    os.close(fd)
    try:
        ssam.save_params(named, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def save_checkpoint(state: TrainState, path):
    named = dict(state.params)
    named["meta.in_bands"] = Tensor(np.float32(state.in_bands))
    named["meta.num_classes"] = Tensor(np.float32(state.num_classes))
    _atomic_save(named, path)


def load_checkpoint(path):
    named = ssam.load_params(path)
    in_bands = int(named.pop("meta.in_bands").data)
    num_classes = int(named.pop("meta.num_classes").data)
    return named, in_bands, num_classes


def train(cfg: TrainConfig, source_samples, target_samples,
          checkpoint_path=None, loss_csv_path=None, log_every=0):
    """Run the full loop; returns (state, list of LossBreakdown)."""
    if not source_samples or not target_samples:
        raise ValueError("both datasets must be non-empty")
    target_bands = target_samples[0].cube.bands
    matched = []
    for s in source_samples:
        cube = match_bands(s.cube, target_bands)
        if cube.bands != target_bands:
            raise ValueError("band matching failed to equalize band counts")
        with_boxes = type(s)(cube, list(s._boxes), list(s._classes),
                             held_out=False, image_id=s.image_id)
        matched.append(with_boxes)
    num_classes = max(max(s.classes, default=1) for s in matched)
    state = init_state(cfg, target_bands, num_classes)

    history = []
    ns, nt = len(matched), len(target_samples)
    for it in range(cfg.iterations):
        si = state.rng.choice(ns, size=min(cfg.batch_size, ns), replace=False)
        ti = state.rng.choice(nt, size=min(cfg.batch_size, nt), replace=False)
        bd = train_step(state, [matched[i] for i in si],
                        [target_samples[i].cube for i in ti])
        history.append(bd)
        if log_every and (it + 1) % log_every == 0:
            print(f"step {it + 1}: total={bd.total:.4f}")

    if loss_csv_path:
        write_loss_csv(history, loss_csv_path)
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state, history


def write_loss_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("step",) + LOSS_FIELDS + ("total",))
        for i, bd in enumerate(history):
            w.writerow([i] + [f"{getattr(bd, k):.6f}" for k in
                              LOSS_FIELDS + ("total",)])


def infer(params, in_bands, num_classes, cubes, cfg: TrainConfig = None):
    """Detect objects in target-domain cubes with a trained model."""
    cfg = cfg or TrainConfig()
    for c in cubes:
        if c.bands != in_bands:
            raise ValueError(
                f"cube has {c.bands} bands but the model expects {in_bands}; "
                f"run band matching first"
            )
    sp = ssam.SsamParams(in_bands=in_bands)
    sp.tensors = params
    out = []
    for cube in cubes:
        batch = _batch_tensor([cube])
        fwd = ssam.ssam_forward(batch, sp, with_decoder=False,
                                with_classifier=False)
        h, w = batch.shape[2], batch.shape[3]
        anchors = detect.generate_anchors(
            [(h // s, w // s) for s in detect.STRIDES]
        )
        logits, deltas = detect.rpn_forward(fwd.fpn_levels, params)
        props = detect.rpn_proposals(logits, deltas, anchors, w,
                                     pre_nms=400,
                                     post_nms=cfg.proposals_infer)
        dets = detect.roi_predict(fwd.fpn_levels, [props[0][0]], params,
                                  num_classes)
        out.extend(dets)
    return out
